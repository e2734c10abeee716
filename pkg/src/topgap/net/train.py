"""Training loop with best-validation checkpointing."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..data.dataset import Dataset
from ..data.split import split
from ..diffcore import AdamState, Tensor, adam_step, backward, no_grad, softmax_ce
from ..errors import DataError, NumericError
from .model import forward, model_loss
from .params import ModelParams

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2
    hflip: bool = False


@dataclass
class TrainLog:
    seed: int = 0
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    train_l1: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    val_l1: list = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.train_loss)

    def rows(self) -> list:
        keys = ("train_loss", "train_acc", "train_l1", "val_loss", "val_acc", "val_l1")
        return [dict(epoch=i, **{k: getattr(self, k)[i] for k in keys}) for i in range(len(self))]

    def digest(self) -> str:
        """Hash of everything except wall time."""
        d = asdict(self)
        d.pop("wall_time")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def evaluate(params: ModelParams, data: Dataset, batch_size: int = 256) -> dict:
    """Eval-mode loss terms and accuracy over ``data``."""
    n = len(data)
    if n == 0:
        return {"loss": float("nan"), "acc": float("nan"), "l1": float("nan")}
    ce_sum = l1_sum = 0.0
    correct = 0
    with no_grad():
        for i in range(0, n, batch_size):
            x = Tensor(data.images[i : i + batch_size].astype(params.dtype, copy=False))
            y = data.labels[i : i + batch_size]
            out = forward(params, x, mode="eval")
            ce_sum += float(softmax_ce(out.logits, y).data) * len(y)
            l1_sum += float(np.abs(out.feature_map.data).mean()) * len(y)
            correct += int((out.logits.data.argmax(axis=1) == y).sum())
    lam = params.head.lam
    return {"loss": (ce_sum + lam * l1_sum) / n, "acc": correct / n, "l1": l1_sum / n, "ce": ce_sum / n}


def train_model(params: ModelParams, dataset: Dataset, epochs: int, batch_size: int = 64,
                hyper: TrainHyper | None = None, seed: int = 0, val: Dataset | None = None,
                callback=None):
    """Adam on ``lam * mean|X| + CE``; returns ``(best_params, TrainLog)``.

    Unless ``val`` is given, a stratified ``val_fraction`` split of
    ``dataset`` is held out. ``params`` is updated in place; the returned
    params are a copy taken at the best validation accuracy (the first such
    epoch on ties).
    """
    hyper = hyper or TrainHyper()
    tlog = TrainLog(seed=seed)
    if epochs == 0:
        return params, tlog
    if len(dataset) == 0:
        raise DataError("training set is empty")
    if val is None:
        if hyper.val_fraction > 0:
            dataset, val = split(dataset, [1 - hyper.val_fraction, hyper.val_fraction], True, seed)
        else:
            val = dataset
    weights = params.trainable()
    state = AdamState(lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps).init(weights)
    lam = params.head.lam
    dtype = params.dtype
    best, best_acc = params.copy(), -1.0
    t0 = time.perf_counter()
    n = len(dataset)
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if hyper.hflip else None
        tot_loss = tot_l1 = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            xb = dataset.images[idx].astype(dtype, copy=False)
            if flips is not None:
                xb = np.where(flips[idx, None, None, None], xb[..., ::-1], xb)
            yb = dataset.labels[idx]
            try:
                out = forward(params, Tensor(xb), mode="train", dropout_seed=seed * 100003 + epoch * 1009 + b)
                terms = model_loss(out, yb, lam)
                backward(terms.total)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}, batch {b}: {exc}") from exc
            if not np.isfinite(terms.total.data):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            adam_step(weights, state)
            tot_loss += float(terms.total.data) * len(idx)
            tot_l1 += terms.l1 * len(idx)
            correct += int((out.logits.data.argmax(axis=1) == yb).sum())
        tlog.train_loss.append(tot_loss / n)
        tlog.train_acc.append(correct / n)
        tlog.train_l1.append(tot_l1 / n)
        ev = evaluate(params, val)
        tlog.val_loss.append(ev["loss"])
        tlog.val_acc.append(ev["acc"])
        tlog.val_l1.append(ev["l1"])
        if ev["acc"] > best_acc:
            best_acc, best = ev["acc"], params.copy()
            tlog.best_epoch = epoch
        log.info("epoch %d loss %.4f acc %.4f val_acc %.4f l1 %.4f", epoch, tlog.train_loss[-1],
                 tlog.train_acc[-1], ev["acc"], ev["l1"])
        if callback is not None:
            callback(epoch, tlog)
    tlog.wall_time = time.perf_counter() - t0
    best.metrics = {"best_val_acc": best_acc, "best_epoch": tlog.best_epoch}
    return best, tlog
