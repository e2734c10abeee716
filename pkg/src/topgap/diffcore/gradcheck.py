"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-6, coords=None) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place.

    ``coords`` limits the work to those flat indices; other entries are NaN.
    """
    g = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    todo = range(flat.size) if coords is None else coords
    if coords is not None:
        gflat[:] = np.nan
    for i in todo:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8, scale_floor: float = 0.0) -> float:
    """max |a-b| / max(|a|, |b|, floor, scale_floor * max|a|), elementwise.

    ``scale_floor`` stops entries many orders below the gradient's own scale
    (where finite differences only resolve round-off) from dominating.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    lo = max(floor, scale_floor * float(np.max(np.abs(a))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), lo)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-6,
                    floor: float = 1e-8, scale_floor: float = 1e-4, max_entries: int | None = None,
                    seed: int = 0) -> float:
    """Largest relative error between analytic and numeric gradients.

    ``fn`` must rebuild the scalar loss from scratch on each call. With
    ``max_entries``, larger tensors are checked on a seeded random subset
    of coordinates.
    """
    loss = fn()
    backward(loss)
    analytic = [np.array(t.grad, dtype=np.float64) for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        coords = None
        if max_entries is not None and t.data.size > max_entries:
            coords = np.sort(rng.choice(t.data.size, max_entries, replace=False))
        gn = numerical_grad(fn, t, h, coords)
        if coords is None:
            worst = max(worst, max_rel_error(ga, gn, floor, scale_floor))
        else:
            lo = max(floor, scale_floor * float(np.max(np.abs(ga))))
            a, b = ga.reshape(-1)[coords], gn.reshape(-1)[coords]
            worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), lo))))
    return worst
