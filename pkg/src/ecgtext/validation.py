"""Input validation helpers shared by the estimator API."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ecgtext.datasets import Dataset, load_dataset

__all__ = ["check_dataset", "check_embeddings", "check_binary_labels"]


def check_dataset(x) -> Dataset:
    """Accept a :class:`Dataset` or a path to one on disk."""
    if isinstance(x, Dataset):
        return x
    if isinstance(x, (str, Path)):
        return load_dataset(x)
    raise TypeError(
        f"expected a Dataset or a dataset directory path, got {type(x).__name__}"
    )


def check_embeddings(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"embeddings must be a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embeddings contain non-finite values")
    return arr


def check_binary_labels(y, n_rows: int) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(y))
    if arr.shape[0] == 1 and n_rows != 1:
        arr = arr.T
    if arr.shape[0] != n_rows:
        raise ValueError(f"labels have {arr.shape[0]} rows, expected {n_rows}")
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError("labels must be binary (0/1)")
    return arr.astype(np.int64)
