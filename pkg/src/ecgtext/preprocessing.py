"""Signal cleanup, patch grids, and the stochastic patch-masking operator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ecgtext.exceptions import ConfigError, DataError

__all__ = [
    "preprocess",
    "preprocess_batch",
    "PatchGrid",
    "patchify",
    "unpatchify",
    "patchify_batch",
    "MaskPlan",
    "sample_mask",
    "mask_seed",
]

_STD_GUARD = 1e-8


def preprocess(signal: np.ndarray) -> np.ndarray:
    """Repair non-finite samples, then z-score each lead.

    Every NaN/Inf sample is replaced by the mean of its nearest finite left
    and right neighbors on the same lead (single neighbor at the edges).
    A lead with no finite samples cannot be repaired.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 2:
        raise ValueError(f"expected a [leads, samples] matrix with >=2 samples, got {x.shape}")
    x = x.copy()
    for c in range(x.shape[0]):
        row = x[c]
        finite = np.isfinite(row)
        if not finite.any():
            raise DataError(f"unrepairable lead {c}: no finite samples")
        if not finite.all():
            fidx = np.flatnonzero(finite)
            bad = np.flatnonzero(~finite)
            right = np.searchsorted(fidx, bad, side="left")
            left = right - 1
            has_left = left >= 0
            has_right = right < fidx.size
            lval = row[fidx[np.clip(left, 0, None)]]
            rval = row[fidx[np.clip(right, None, fidx.size - 1)]]
            repaired = np.where(
                has_left & has_right,
                0.5 * (lval + rval),
                np.where(has_left, lval, rval),
            )
            row[bad] = repaired
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    return (x - mean) / (std + _STD_GUARD)


def preprocess_batch(signals: np.ndarray) -> np.ndarray:
    """Apply :func:`preprocess` to a stack of [C, T] signals.

    Fully finite batches take a vectorized path; anything else falls back to
    the per-record repair loop.
    """
    x = np.asarray(signals, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected [n, leads, samples], got shape {x.shape}")
    if x.shape[0] and np.isfinite(x).all():
        mean = x.mean(axis=2, keepdims=True)
        std = x.std(axis=2, keepdims=True)
        return (x - mean) / (std + _STD_GUARD)
    return np.stack([preprocess(rec) for rec in x]) if x.shape[0] else x.copy()


@dataclass(frozen=True)
class PatchGrid:
    """Lead-major patch view of one signal: patch ``k`` covers lead
    ``k // (T/p)``, samples ``(k % (T/p)) * p`` onward."""

    patches: np.ndarray  # [n_patches, p]
    lead_index: np.ndarray  # [n_patches]
    time_index: np.ndarray  # [n_patches]
    p: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def grid_indices(n_leads: int, n_samples: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    per_lead = n_samples // p
    lead = np.repeat(np.arange(n_leads), per_lead)
    time = np.tile(np.arange(per_lead), n_leads)
    return lead, time


def patchify(signal: np.ndarray, p: int) -> PatchGrid:
    x = np.asarray(signal)
    if x.ndim != 2:
        raise ValueError(f"expected [leads, samples], got shape {x.shape}")
    n_leads, n_samples = x.shape
    if p <= 0 or n_samples % p != 0:
        raise ConfigError(f"invalid patch length {p} for {n_samples} samples")
    lead, time = grid_indices(n_leads, n_samples, p)
    patches = x.reshape(n_leads, n_samples // p, p).reshape(-1, p)
    return PatchGrid(patches=patches, lead_index=lead, time_index=time, p=p)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    n_leads = int(grid.lead_index[-1]) + 1 if grid.n_patches else 0
    per_lead = grid.n_patches // max(n_leads, 1)
    return grid.patches.reshape(n_leads, per_lead * grid.p)


def patchify_batch(signals: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patchify [N, C, T] into ([N, n_patches, p], lead_index, time_index)."""
    x = np.asarray(signals)
    n, n_leads, n_samples = x.shape
    if p <= 0 or n_samples % p != 0:
        raise ConfigError(f"invalid patch length {p} for {n_samples} samples")
    lead, time = grid_indices(n_leads, n_samples, p)
    return x.reshape(n, n_leads * (n_samples // p), p), lead, time


@dataclass(frozen=True)
class MaskPlan:
    """Partition of patch indices into masked and visible sets."""

    n_patches: int
    masked: np.ndarray  # sorted
    visible: np.ndarray  # sorted
    seed: object

    @property
    def n_masked(self) -> int:
        return self.masked.size


def mask_seed(base_seed: int, record_id: int, epoch: int) -> tuple[int, int, int]:
    """Seed material for one record's mask draw in one epoch."""
    return (int(base_seed), int(record_id), int(epoch))


def sample_mask(n_patches: int, ratio: float, seed) -> MaskPlan:
    """Uniform without-replacement draw of ``round(ratio * n_patches)``
    masked indices; deterministic for a fixed seed."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    n_masked = int(math.floor(ratio * n_patches + 0.5))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_patches)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    return MaskPlan(n_patches=n_patches, masked=masked, visible=visible, seed=seed)
