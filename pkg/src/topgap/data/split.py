"""Deterministic stratified partitions."""

from __future__ import annotations

import numpy as np

from ..errors import DataError
from .dataset import Dataset


def _allocate(n: int, fractions) -> np.ndarray:
    # largest-remainder rounding keeps every part within one sample of target
    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(np.int64)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def split_indices(labels, fractions, stratified: bool = True, seed: int = 0) -> list:
    fractions = [float(f) for f in fractions]
    if not fractions or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)] if stratified else [np.arange(len(labels))]
    for members in groups:
        members = rng.permutation(members)
        start = 0
        for p, cnt in zip(parts, _allocate(len(members), fractions)):
            p.extend(members[start : start + cnt].tolist())
            start += cnt
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def split(dataset: Dataset, fractions, stratified: bool = True, seed: int = 0) -> list:
    """Partition ``dataset`` by ``fractions``; per-class counts within +-1 of target."""
    return [dataset.subset(idx) for idx in split_indices(dataset.labels, fractions, stratified, seed)]


def kfold_indices(labels, n_folds: int, seed: int = 0) -> list:
    labels = np.asarray(labels)
    if n_folds < 2:
        raise DataError(f"need at least 2 folds, got {n_folds}")
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < n_folds]
    if small.size:
        raise DataError(f"classes {small.tolist()} have fewer samples than {n_folds} folds")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(n_folds)]
    offset = 0
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        for j, i in enumerate(members):
            folds[(j + offset) % n_folds].append(int(i))
        offset += len(members)
    return [np.sort(np.asarray(f, dtype=np.int64)) for f in folds]


def kfold(dataset: Dataset, n_folds: int = 5, seed: int = 0) -> list:
    """Stratified folds as ``(train, val)`` pairs."""
    folds = kfold_indices(dataset.labels, n_folds, seed)
    out = []
    for i, val_idx in enumerate(folds):
        train_idx = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        out.append((dataset.subset(train_idx), dataset.subset(val_idx)))
    return out
