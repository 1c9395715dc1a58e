"""Dense-array math with reverse-mode differentiation on an explicit tape.

Every array that participates in a gradient computation is a :class:`Tensor`
wrapping a float32/float64 numpy array.  Operations executed while a
:class:`Tape` is active append one record each (inputs, output, local vjp);
``Tape.backward`` replays the records in reverse and accumulates adjoints.
With no active tape the same functions are plain numpy at full speed, which
is the evaluation path.

Training runs in float32; gradient checking against :func:`finite_diff_grad`
must run in float64.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteLossError",
    "forward_backward",
    "finite_diff_grad",
]

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NonFiniteLossError(ArithmeticError):
    """Raised when a forward pass produces a non-finite scalar loss."""


class Tensor:
    """A dense float array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; non-Tensor operands are treated as constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


class _Record:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of the primitives of one forward pass.

    Records are appended in execution order, so inputs always precede the
    operations that consume them; one reverse sweep therefore visits every
    node after all of its uses.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self) -> int:
        return len(self.records)

    def first_nonfinite_op(self) -> str | None:
        """Name of the first recorded primitive with a non-finite output."""
        for rec in self.records:
            if not np.all(np.isfinite(rec.output.data)):
                return rec.op
        return None

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from loss."""
        if loss.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        produced = {id(rec.output) for rec in self.records}
        for rec in reversed(self.records):
            g = adjoint.pop(id(rec.output), None)
            if g is None:
                continue
            grads = rec.vjp(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                held = adjoint.get(key)
                adjoint[key] = gi if held is None else held + gi
                if key not in produced:
                    leaves[key] = inp
        for key, tensor in leaves.items():
            if tensor.requires_grad and key in adjoint:
                # ascontiguousarray promotes 0-d to 1-d; reshape restores it
                tensor.grad = np.ascontiguousarray(adjoint[key]).reshape(
                    tensor.data.shape
                )


def _emit(op: str, out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.records.append(_Record(op, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit("sub", a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", a.data * b.data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None,
        )

    return _emit("div", a.data / b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), vjp)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _emit("pow", a.data ** exponent, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    # exact erf form: 0.5 x (1 + erf(x / sqrt 2)); temporaries are reused in
    # place because this runs on the largest activations in the network
    x = a.data
    cdf = x * _INV_SQRT2
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5

    def vjp(g):
        pdf = x * x
        pdf *= -0.5
        np.exp(pdf, out=pdf)
        pdf *= _INV_SQRT2PI
        pdf *= x
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _emit("gelu", x * cdf, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _emit("softplus", out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = math.prod(a.data.shape[ax] for ax in axis)
    else:
        count = a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def vjp(g):
        tmp = g * out
        dot = tmp.sum(axis=axis, keepdims=True)
        np.subtract(g, dot, out=tmp)
        tmp *= out
        return (tmp,)

    return _emit("softmax", out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """max-subtracted log softmax; exp of the output sums to 1 along axis."""
    out = a.data - a.data.max(axis=axis, keepdims=True)
    out -= np.log(np.exp(out).sum(axis=axis, keepdims=True))

    def vjp(g):
        tmp = np.exp(out)
        tmp *= g.sum(axis=axis, keepdims=True)
        np.subtract(g, tmp, out=tmp)
        return (tmp,)

    return _emit("log_softmax", out, (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _emit(
        "reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        "transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a[index]`` along axis 0; ``index`` may have any shape."""
    index = np.asarray(index)

    def vjp(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, index.ravel(), g.reshape((-1,) + a.shape[1:]))
        return (out,)

    return _emit("take_rows", a.data[index], (a,), vjp)


def take_along_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row gather: out[b, i] = a[b, index[b, i]] for a of shape [B, n, d]."""
    index = np.asarray(index)
    batch = np.arange(a.shape[0])[:, None]

    def vjp(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, (batch, index), g)
        return (out,)

    return _emit("take_along_rows", a.data[batch, index], (a,), vjp)


def scatter_rows(values: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Per-batch row scatter into zeros: out[b, index[b, i]] = values[b, i].

    Row indices must be unique within each batch element.
    """
    index = np.asarray(index)
    batch_shape = (values.shape[0], n_rows) + values.shape[2:]
    out = np.zeros(batch_shape, dtype=values.dtype)
    np.put_along_axis(out, index[..., None], values.data, axis=1)
    batch = np.arange(values.shape[0])[:, None]

    def vjp(g):
        return (g[batch, index],)

    return _emit("scatter_rows", out, (values,), vjp)


# ---------------------------------------------------------------------------
# composites


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Fused primitive: one record on the tape with the standard closed-form
    vjp, since this runs twice per transformer block on full activations.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xhat = x - mu
    var = np.mean(xhat * xhat, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gain.data
    out += bias.data

    def vjp(g):
        d = x.shape[-1]
        ga = ggain = gbias = None
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if gain.requires_grad:
            ggain = np.einsum(
                "nd,nd->d", g.reshape(-1, d), xhat.reshape(-1, d)
            )
        if a.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            tmp = gh * xhat
            m2 = tmp.mean(axis=-1, keepdims=True)
            np.multiply(xhat, m2, out=tmp)
            gh -= m1
            gh -= tmp
            gh *= inv
            ga = gh
        return ga, ggain, gbias

    return _emit("layer_norm", out, (a, gain, bias), vjp)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale to unit L2 norm along ``axis``; the norm is floored at ``eps``
    so the zero vector maps to zero with a finite gradient."""
    sq = tsum(square(a), axis=axis, keepdims=True)
    norm = pow_const(add(sq, _as_tensor(eps * eps, a)), 0.5)
    return div(a, norm)


# ---------------------------------------------------------------------------
# driver + oracle


def forward_backward(
    loss_builder: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_builder(params)`` under a fresh tape and return the
    scalar loss plus one exact reverse-mode gradient per parameter.

    Parameters never reached by the loss get a zero gradient.  A non-finite
    loss raises :class:`NonFiniteLossError` naming the first primitive whose
    output went non-finite.
    """
    for p in params.values():
        p.grad = None
    tape = Tape()
    with tape:
        loss = loss_builder(params)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("loss_builder must produce a scalar Tensor")
    if not np.isfinite(loss.data):
        culprit = tape.first_nonfinite_op() or "<input>"
        raise NonFiniteLossError(
            f"non-finite loss: first non-finite output produced by '{culprit}'"
        )
    tape.backward(loss)
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = g
        grads[name] = g
    return float(loss.data), grads


def finite_diff_grad(
    loss_builder: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle, evaluated coordinate by coordinate
    in float64.  ``loss_builder`` must be deterministic."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {
        name: Tensor(p.data.astype(np.float64).copy(), requires_grad=False)
        for name, p in params.items()
    }

    def evaluate() -> float:
        out = loss_builder(work)
        return float(out.data)

    grads = {}
    for name, p in work.items():
        flat = p.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = evaluate()
            flat[i] = saved - eps
            lo = evaluate()
            flat[i] = saved
            g[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g.reshape(p.data.shape)
    return grads
