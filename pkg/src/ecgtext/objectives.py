"""Training objectives: symmetric contrastive alignment, masked Gaussian
reconstruction, their coefficient-free sum, a cosine bottleneck penalty, the
bottleneck-regularized alignment objective, and a contrastive
mutual-information proxy for diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ecgtext import autodiff as ad
from ecgtext.autodiff import Tensor
from ecgtext.exceptions import ConfigError, DataError

__all__ = [
    "ObjectiveConfig",
    "loss_cma",
    "loss_rec",
    "loss_merit",
    "loss_ib",
    "loss_mib",
    "mi_proxy",
]

REC_SCOPES = ("masked_only", "all_patches")


@dataclass(frozen=True)
class ObjectiveConfig:
    tau: float = 0.07
    lambda_ib: float = 0.1
    rec_scope: str = "masked_only"
    # fixed decoder variance; recorded for reproducibility, never multiplied
    # into the loss (it only rescales the squared error by a constant)
    sigma2: float = 1.0

    def validate(self) -> "ObjectiveConfig":
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.lambda_ib < 0:
            raise ConfigError(f"lambda_ib must be >= 0, got {self.lambda_ib}")
        if self.rec_scope not in REC_SCOPES:
            raise ConfigError(f"rec_scope must be one of {REC_SCOPES}")
        if self.sigma2 <= 0:
            raise ConfigError("sigma2 must be positive")
        return self


def _paired_log_softmax_mean(logits: Tensor, axis: int) -> Tensor:
    """Mean over the batch of the paired (diagonal) log-softmax entries."""
    b = logits.shape[0]
    eye = Tensor(np.eye(b, dtype=logits.dtype))
    picked = ad.mul(ad.log_softmax(logits, axis=axis), eye)
    return ad.mul(ad.tsum(picked), Tensor(np.asarray(1.0 / b, dtype=logits.dtype)))


def loss_cma(z_proj: Tensor, r_proj: Tensor, tau: float) -> Tensor:
    """Sum of the two directional in-batch contrastive terms over unit-norm
    projected embeddings; similarity is the dot product (cosine)."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if z_proj.shape[0] < 1 or z_proj.shape != r_proj.shape:
        raise ValueError(f"bad embedding shapes {z_proj.shape} vs {r_proj.shape}")
    sim = ad.matmul(z_proj, ad.transpose(r_proj, (1, 0)))
    logits = ad.mul(sim, Tensor(np.asarray(1.0 / tau, dtype=sim.dtype)))
    z_to_r = ad.neg(_paired_log_softmax_mean(logits, axis=1))
    r_to_z = ad.neg(_paired_log_softmax_mean(logits, axis=0))
    return ad.add(z_to_r, r_to_z)


def loss_rec(
    target_patches: Tensor,
    predicted_patches: Tensor,
    masked_index: np.ndarray,
    scope: str = "masked_only",
) -> Tensor:
    """Mean squared error over the selected patch set's elements.

    ``masked_only`` restricts to rows listed in ``masked_index`` ([B, k]);
    ``all_patches`` averages over the full grid.  The mean (not sum) keeps
    magnitudes comparable across mask ratios and batch sizes.
    """
    if scope not in REC_SCOPES:
        raise ConfigError(f"rec_scope must be one of {REC_SCOPES}")
    if target_patches.shape != predicted_patches.shape:
        raise ValueError(
            f"shape mismatch {target_patches.shape} vs {predicted_patches.shape}"
        )
    if scope == "masked_only":
        masked_index = np.asarray(masked_index)
        if masked_index.size == 0:
            raise DataError("empty reconstruction target: no masked patches")
        target_patches = ad.take_along_rows(target_patches, masked_index)
        predicted_patches = ad.take_along_rows(predicted_patches, masked_index)
    diff = ad.sub(predicted_patches, target_patches)
    return ad.tmean(ad.square(diff))


def loss_merit(
    z_proj: Tensor,
    r_proj: Tensor,
    target_patches: Tensor,
    predicted_patches: Tensor,
    masked_index: np.ndarray,
    config: ObjectiveConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """Coefficient-free sum of alignment and reconstruction.

    Returns (total, alignment part, reconstruction part).
    """
    cma = loss_cma(z_proj, r_proj, config.tau)
    rec = loss_rec(target_patches, predicted_patches, masked_index, config.rec_scope)
    return ad.add(cma, rec), cma, rec


def loss_ib(z_proj: Tensor, r_proj: Tensor) -> Tensor:
    """Mean cosine misalignment of paired unit-norm embeddings: in [0, 2]."""
    if z_proj.shape[0] < 1 or z_proj.shape != r_proj.shape:
        raise ValueError(f"bad embedding shapes {z_proj.shape} vs {r_proj.shape}")
    cos = ad.tsum(ad.mul(z_proj, r_proj), axis=1)
    return ad.tmean(ad.sub(Tensor(np.asarray(1.0, dtype=cos.dtype)), cos))


def loss_mib(
    z_proj: Tensor,
    r_proj: Tensor,
    config: ObjectiveConfig,
    z_ib: Tensor | None = None,
    r_ib: Tensor | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Alignment plus the weighted bottleneck penalty.

    The alignment term always uses the projected pair.  The bottleneck
    penalty uses ``(z_ib, r_ib)`` when given (training passes the
    unit-normalized pooled embeddings, where compression acts on the space
    downstream probes actually read) and falls back to the projected pair.
    Returns (total, alignment part, bottleneck part).
    """
    if config.lambda_ib < 0:
        raise ConfigError("lambda_ib must be >= 0")
    cma = loss_cma(z_proj, r_proj, config.tau)
    ib = loss_ib(z_ib if z_ib is not None else z_proj, r_ib if r_ib is not None else r_proj)
    weighted = ad.mul(ib, Tensor(np.asarray(config.lambda_ib, dtype=ib.dtype)))
    return ad.add(cma, weighted), cma, ib


def mi_proxy(z_proj: np.ndarray, r_proj: np.ndarray, tau: float) -> float:
    """Contrastive lower-bound estimate of the shared information between the
    two embedding sets: ``log B`` minus the signal-to-report directional
    term.  Never exceeds ``log B``.  Pure numpy; evaluation only."""
    z = np.asarray(z_proj, dtype=np.float64)
    r = np.asarray(r_proj, dtype=np.float64)
    b = z.shape[0]
    if b < 2:
        raise ValueError("uninformative bound: need a batch of at least 2")
    logits = (z @ r.T) / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_softmax = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    z_to_r = -float(np.mean(np.diag(log_softmax)))
    return math.log(b) - z_to_r
