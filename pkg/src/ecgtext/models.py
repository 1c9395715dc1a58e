"""Dual-branch architecture: patch-token signal encoder with mask-token
insertion and a reconstruction decoder, a token-sequence text encoder, and
linear projection heads into a shared unit-norm embedding space.

All forward passes are batched: token tensors are [B, n, d_model] and run on
:mod:`ecgtext.autodiff`, so the same code path serves gradient training,
finite-difference checking (float64), and tape-free evaluation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ecgtext import autodiff as ad
from ecgtext.autodiff import Tensor
from ecgtext.exceptions import ConfigError

__all__ = [
    "EncoderConfig",
    "init_params",
    "param_names",
    "param_layout_hash",
    "flatten_params",
    "unflatten_params",
    "embed_patches",
    "ecg_encode",
    "insert_mask_tokens",
    "decode",
    "text_encode",
    "pool_mean",
    "pool_mean_padded",
    "project",
    "pad_reports",
]

_INIT_SCALE = 0.02
_STREAM_INIT = 2
_ATTN_MASK_BIAS = -1e9  # finite so padded positions stay differentiable

_ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters shared by both branches."""

    vocab_size: int
    max_report_len: int
    n_leads: int = 12
    patches_per_lead: int = 20
    p: int = 50
    d_model: int = 64
    n_heads: int = 4
    depth_ecg: int = 2
    depth_text: int = 2
    depth_dec: int = 1
    d_proj: int = 32
    activation: str = "gelu"

    def validate(self) -> "EncoderConfig":
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if min(self.depth_ecg, self.depth_text, self.depth_dec) < 0:
            raise ConfigError("depths must be >= 0")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if min(self.vocab_size, self.max_report_len, self.n_leads, self.patches_per_lead, self.p) < 1:
            raise ConfigError("sizes must be >= 1")
        if self.d_proj < 1:
            raise ConfigError("d_proj must be >= 1")
        return self

    @property
    def n_patches(self) -> int:
        return self.n_leads * self.patches_per_lead

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _block_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    h = 4 * d
    return [
        (f"{prefix}.ln1.gain", (d,)),
        (f"{prefix}.ln1.bias", (d,)),
        (f"{prefix}.attn.wq", (d, d)),
        (f"{prefix}.attn.bq", (d,)),
        (f"{prefix}.attn.wk", (d, d)),
        (f"{prefix}.attn.bk", (d,)),
        (f"{prefix}.attn.wv", (d, d)),
        (f"{prefix}.attn.bv", (d,)),
        (f"{prefix}.attn.wo", (d, d)),
        (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.ln2.gain", (d,)),
        (f"{prefix}.ln2.bias", (d,)),
        (f"{prefix}.mlp.w1", (d, h)),
        (f"{prefix}.mlp.b1", (h,)),
        (f"{prefix}.mlp.w2", (h, d)),
        (f"{prefix}.mlp.b2", (d,)),
    ]


def param_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter layout; flatten/unflatten and checkpoints follow
    this exact order."""
    d = config.d_model
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("ecg.patch_embed.weight", (config.p, d)),
        ("ecg.patch_embed.bias", (d,)),
        ("ecg.pos_lead", (config.n_leads, d)),
        ("ecg.pos_time", (config.patches_per_lead, d)),
    ]
    for i in range(config.depth_ecg):
        shapes.extend(_block_shapes(f"ecg.block{i}", d))
    shapes.extend(
        [
            ("text.tok_embed", (config.vocab_size, d)),
            ("text.pos_embed", (config.max_report_len, d)),
        ]
    )
    for i in range(config.depth_text):
        shapes.extend(_block_shapes(f"text.block{i}", d))
    shapes.append(("dec.mask_token", (d,)))
    for i in range(config.depth_dec):
        shapes.extend(_block_shapes(f"dec.block{i}", d))
    shapes.extend(
        [
            ("dec.head.weight", (d, config.p)),
            ("dec.head.bias", (config.p,)),
            ("proj.ecg.weight", (d, config.d_proj)),
            ("proj.ecg.bias", (config.d_proj,)),
            ("proj.text.weight", (d, config.d_proj)),
            ("proj.text.bias", (config.d_proj,)),
        ]
    )
    return shapes


def param_names(config: EncoderConfig) -> list[str]:
    return [name for name, _ in param_shapes(config)]


def param_layout_hash(config: EncoderConfig) -> str:
    doc = json.dumps(param_shapes(config), sort_keys=False)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def init_params(config: EncoderConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Seed-deterministic initialization in canonical order: small normals
    for weights and tables, ones for norm gains, zeros for biases."""
    config.validate()
    rng = np.random.default_rng((int(seed), _STREAM_INIT))
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config):
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, _INIT_SCALE, size=shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


def flatten_params(params: dict[str, Tensor], config: EncoderConfig) -> np.ndarray:
    return np.concatenate(
        [params[name].data.ravel() for name in param_names(config)]
    )


def unflatten_params(
    flat: np.ndarray, config: EncoderConfig, dtype=np.float32
) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    offset = 0
    for name, shape in param_shapes(config):
        size = math.prod(shape)
        chunk = flat[offset : offset + size]
        if chunk.size != size:
            raise ConfigError("flat parameter vector does not match the layout")
        params[name] = Tensor(
            chunk.reshape(shape).astype(dtype, copy=True), requires_grad=True
        )
        offset += size
    if offset != flat.size:
        raise ConfigError("flat parameter vector does not match the layout")
    return params


# ---------------------------------------------------------------------------
# forward pieces


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _attention(x: Tensor, params, prefix: str, config: EncoderConfig, bias) -> Tensor:
    b, n = x.shape[0], x.shape[1]
    heads, dh = config.n_heads, config.head_dim

    def split(t: Tensor) -> Tensor:  # [B, n, d] -> [B, H, n, dh]
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(x, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"]))
    k = split(_linear(x, params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.bk"]))
    v = split(_linear(x, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"]))
    # scale q rather than the n x n score matrix
    q = ad.mul(q, Tensor(np.asarray(1.0 / math.sqrt(dh), dtype=x.dtype)))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    if bias is not None:
        scores = ad.add(scores, bias)
    att = ad.softmax(scores, axis=-1)
    out = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3))  # [B, n, H, dh]
    out = ad.reshape(out, (b, n, config.d_model))
    return _linear(out, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])


def _block(x: Tensor, params, prefix: str, config: EncoderConfig, bias=None) -> Tensor:
    act = _ACTIVATIONS[config.activation]
    h = ad.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    x = ad.add(x, _attention(h, params, prefix, config, bias))
    h = ad.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    h = _linear(act(_linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])),
                params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return ad.add(x, h)


def embed_patches(
    patches: Tensor, lead_index: np.ndarray, time_index: np.ndarray, params
) -> Tensor:
    """[B, n, p] patches -> [B, n, d] tokens with separable learned positions."""
    tokens = _linear(patches, params["ecg.patch_embed.weight"], params["ecg.patch_embed.bias"])
    pos = ad.add(
        ad.take_rows(params["ecg.pos_lead"], np.asarray(lead_index)),
        ad.take_rows(params["ecg.pos_time"], np.asarray(time_index)),
    )
    return ad.add(tokens, pos)


def ecg_encode(tokens: Tensor, params, config: EncoderConfig) -> Tensor:
    """Pre-norm transformer over signal tokens; depth 0 is the identity."""
    x = tokens
    for i in range(config.depth_ecg):
        x = _block(x, params, f"ecg.block{i}", config)
    return x


def insert_mask_tokens(
    z_vis: Tensor,
    visible_index: np.ndarray,
    masked_index: np.ndarray,
    lead_index: np.ndarray,
    time_index: np.ndarray,
    params,
    n_patches: int,
) -> Tensor:
    """Scatter visible states back to their grid slots and fill every masked
    slot with the learned mask token plus that slot's positional embedding."""
    visible_index = np.asarray(visible_index)
    masked_index = np.asarray(masked_index)
    if visible_index.shape[1] != z_vis.shape[1]:
        raise ValueError(
            f"visible index count {visible_index.shape[1]} does not match "
            f"{z_vis.shape[1]} encoded rows"
        )
    upper = max(int(visible_index.max(initial=-1)), int(masked_index.max(initial=-1)))
    if upper >= n_patches:
        raise ValueError(f"patch index {upper} out of range for {n_patches} patches")
    full = ad.scatter_rows(z_vis, visible_index, n_patches)
    if masked_index.shape[1] == 0:
        return full
    mask_pos = ad.add(
        ad.take_rows(params["ecg.pos_lead"], np.asarray(lead_index)[masked_index]),
        ad.take_rows(params["ecg.pos_time"], np.asarray(time_index)[masked_index]),
    )
    mask_rows = ad.add(mask_pos, params["dec.mask_token"])
    return ad.add(full, ad.scatter_rows(mask_rows, masked_index, n_patches))


def decode(z_full: Tensor, params, config: EncoderConfig) -> Tensor:
    """Decoder blocks plus a linear head back to patch space: [B, n, p]."""
    x = z_full
    for i in range(config.depth_dec):
        x = _block(x, params, f"dec.block{i}", config)
    return _linear(x, params["dec.head.weight"], params["dec.head.bias"])


def pad_reports(
    reports: list[np.ndarray], max_len: int, vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token id sequences to a shared length; returns (ids, mask)."""
    if any(len(r) > max_len for r in reports):
        raise ValueError(f"report longer than max_report_len={max_len}")
    length = max(1, max((len(r) for r in reports), default=1))
    ids = np.zeros((len(reports), length), dtype=np.int64)
    mask = np.zeros((len(reports), length), dtype=np.float64)
    for i, rep in enumerate(reports):
        if rep.size and int(rep.max()) >= vocab_size:
            raise ValueError(f"token id {int(rep.max())} outside vocabulary of size {vocab_size}")
        ids[i, : len(rep)] = rep
        mask[i, : len(rep)] = 1.0
    return ids, mask


def text_encode(
    ids: np.ndarray, pad_mask: np.ndarray, params, config: EncoderConfig
) -> Tensor:
    """Token + learned positional embedding, then pre-norm blocks.  Padded
    positions are hidden from attention by a large negative score bias."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be [B, L]")
    if ids.shape[1] > config.max_report_len:
        raise ValueError("sequence longer than max_report_len")
    if int(ids.max(initial=0)) >= config.vocab_size:
        raise ValueError("token id outside vocabulary")
    length = ids.shape[1]
    x = ad.add(
        ad.take_rows(params["text.tok_embed"], ids),
        ad.take_rows(params["text.pos_embed"], np.arange(length)),
    )
    dtype = params["text.tok_embed"].dtype
    bias = None
    if pad_mask is not None and not np.all(pad_mask > 0):
        bias = Tensor(
            ((1.0 - np.asarray(pad_mask)) * _ATTN_MASK_BIAS)[:, None, None, :].astype(dtype)
        )
    for i in range(config.depth_text):
        x = _block(x, params, f"text.block{i}", config, bias=bias)
    return x


def pool_mean(states: Tensor) -> Tensor:
    """Mean over the token axis of [B, n, d]."""
    if states.shape[1] < 1:
        raise ValueError("empty pool: no token states to average")
    return ad.tmean(states, axis=1)


def pool_mean_padded(states: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Mean over real (unpadded) token states only."""
    mask = np.asarray(pad_mask, dtype=states.dtype)
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts < 1):
        raise ValueError("empty pool: a record has no real tokens")
    weighted = ad.tsum(ad.mul(states, Tensor(mask[:, :, None])), axis=1)
    return ad.div(weighted, Tensor(counts.astype(states.dtype)))


def project(v: Tensor, params, modality: str) -> Tensor:
    """Linear map into the shared space, then unit-norm rows."""
    if modality not in ("ecg", "text"):
        raise ValueError(f"unknown projection head {modality!r}")
    out = _linear(v, params[f"proj.{modality}.weight"], params[f"proj.{modality}.bias"])
    return ad.l2_normalize(out, axis=-1)
