"""Dense tensors with a recording tape for reverse-mode differentiation."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError, StateError

_FLOATS = (np.float32, np.float64)
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _active_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Evaluate without recording anything on a tape."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """Row-major numeric array with an optional gradient buffer.

    Only float32 and float64 are stored; anything else is cast to float32.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_retain", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._retain = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep this (non-leaf) tensor's gradient after backward."""
        self._retain = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)

    def __getitem__(self, idx):
        from .ops import index

        return index(self, idx)

    def sum(self):
        from .ops import sum_all

        return sum_all(self)


@dataclass
class _Record:
    out: Tensor
    parents: tuple
    backward: Callable


class Tape:
    """Ordered record of primitives executed on tensors requiring gradients.

    Usable as a context manager; operations executed inside record here.
    Outside any context a fresh tape is started on demand and then
    propagates through its outputs.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "tapes"):
            _local.tapes = []
        _local.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise StateError("cannot record on a tape whose backward pass already ran")
        out._tape = self
        self.records.append(_Record(out, tuple(parents), backward))

    def absorb(self, other: "Tape") -> None:
        """Append an independent tape's records (branches that only meet now)."""
        if self.consumed or other.consumed:
            raise StateError("cannot combine a tape whose backward pass already ran")
        for rec in other.records:
            rec.out._tape = self
        self.records.extend(other.records)
        other.records = []
        other.consumed = True

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        if self.consumed:
            raise StateError("backward already ran on this tape; run a new forward pass first")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        if loss.is_leaf:
            leaves[id(loss)] = (loss, grads[id(loss)])
        for rec in reversed(self.records):
            g = grads.get(id(rec.out)) if retain or rec.out._retain else grads.pop(id(rec.out), None)
            if g is None:
                continue
            if rec.out._retain:
                rec.out.grad = g
            pgrads = rec.backward(g)
            for p, pg in zip(rec.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is None:
                    prev = leaves.get(id(p))
                    leaves[id(p)] = (p, pg if prev is None else prev[1] + pg)
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
        for t, g in leaves.values():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for leaf of shape {t.shape}")
            t.grad = g
        if not retain:
            self.consumed = True
            self.records = []


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op output, recording it if any parent requires a gradient."""
    if not np.isfinite(data.sum()):
        raise NumericError(f"non-finite values produced (shape {data.shape})")
    out = Tensor(data)
    if not _grad_enabled() or not any(p.requires_grad for p in parents):
        return out
    tape = None
    for p in parents:
        if p._tape is not None:
            if tape is None:
                tape = p._tape
            elif p._tape is not tape:
                tape.absorb(p._tape)
    if tape is None:
        tape = _active_tape()
    if tape is None:
        tape = Tape()
    out.requires_grad = True
    tape.record(out, parents, backward)
    return out


def backward(loss: Tensor, retain: bool = False) -> None:
    """Populate ``.grad`` on every leaf tensor that requires a gradient.

    Leaf gradients are overwritten, not accumulated. Calling twice on the
    same forward pass is an error unless ``retain=True`` was used.
    """
    if loss._tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise StateError("loss was not produced by a recorded forward pass")
    loss._tape.backward(loss, retain=retain)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
