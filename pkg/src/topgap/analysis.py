"""Saliency and receptive-field diagnostics.

Models are duck-typed: ``feature_map(Tensor)`` for ERF maps,
``forward_features(Tensor) -> (features, logits)`` for GradCAM.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .diffcore import Tensor, backward, index, mul, no_grad, sum_all
from .errors import ConfigurationError, DataError, NumericError
from .net.model import cam_mode, minmax, upsample_to

ERF_PROCEDURE = "joint-z"


@dataclass
class GradMap:
    raw: np.ndarray  # N x H x W, sum over input channels of |d out / d pixel|
    location: tuple

    @property
    def z(self) -> np.ndarray:
        """Per-map z-normalisation (mean 0, std 1)."""
        return _znorm(self.raw, axes=(-2, -1))


def _znorm(v: np.ndarray, axes) -> np.ndarray:
    v = v.astype(np.float64)
    mu = v.mean(axis=axes, keepdims=True)
    sd = v.std(axis=axes, keepdims=True)
    return np.where(sd > 0, (v - mu) / np.where(sd > 0, sd, 1), 0.0)


def output_location(size: int, where) -> tuple:
    if where == "center":
        return size // 2, size // 2
    if where == "corner":
        return 0, 0
    i, j = where
    return int(i), int(j)


def erf_gradient_map(model, images: np.ndarray, out_loc="center") -> GradMap:
    """Input gradient of the class map at one output location, summed over classes."""
    x = Tensor(np.array(images), requires_grad=True)
    fmap = model.feature_map(x)
    i, j = output_location(fmap.shape[-1], out_loc)
    backward(sum_all(index(fmap, (slice(None), slice(None), i, j))))
    g = np.zeros(x.shape, dtype=x.dtype) if x.grad is None else x.grad
    return GradMap(np.abs(g).sum(axis=1), (i, j))


@dataclass
class ErfReport:
    center: float
    corner: float
    distance: float
    n: int
    procedure: str = ERF_PROCEDURE

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def erf_values(center: np.ndarray, corner: np.ndarray) -> tuple:
    """Per-image ERF of both locations after joint z-normalisation of the pair."""
    pooled = np.stack([center, corner], axis=1).astype(np.float64)  # N x 2 x H x W
    z = _znorm(pooled, axes=(1, 2, 3))
    return np.abs(z[:, 0]).mean(axis=(1, 2)), np.abs(z[:, 1]).mean(axis=(1, 2))


def erf_distance(model, images: np.ndarray, batch_size: int = 128) -> ErfReport:
    """Mean centre ERF minus mean corner ERF over ``images``."""
    images = np.asarray(images)
    if len(images) == 0:
        raise DataError("erf_distance needs at least one image")
    cs, ks = [], []
    for b in range(0, len(images), batch_size):
        xb = images[b : b + batch_size]
        c, k = erf_values(erf_gradient_map(model, xb, "center").raw, erf_gradient_map(model, xb, "corner").raw)
        cs.append(c)
        ks.append(k)
    center = float(np.concatenate(cs).mean())
    corner = float(np.concatenate(ks).mean())
    return ErfReport(center, corner, center - corner, len(images))


# --------------------------------------------------------------------------
# CAMs


@dataclass
class CamResult:
    cam: np.ndarray  # N x H x W in [0, 1]
    method: str
    class_idx: np.ndarray
    channel_weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def gradcam(model, images: np.ndarray, class_idx, layer: int = -1) -> CamResult:
    """ReLU of gradient-weighted feature channels, upsampled and min-max scaled.

    Weights are the spatial mean of d logit_c / d feature. ``layer`` indexes
    the model's feature list (default: the last, lowest-resolution map).
    """
    images = np.asarray(images)
    n = len(images)
    # input grad keeps the tape alive on a frozen model
    x = Tensor(images, requires_grad=True)
    feats, logits = model.forward_features(x)
    try:
        feat = feats[layer]
    except IndexError as exc:
        raise ConfigurationError(f"no feature map at layer {layer}") from exc
    feat.retain_grad()
    c = logits.shape[1]
    cls = np.broadcast_to(np.asarray(class_idx, dtype=np.int64), (n,)).copy()
    if np.any(cls < 0) or np.any(cls >= c):
        raise ConfigurationError(f"class index out of range [0, {c})")
    if not logits.requires_grad or not feat.requires_grad:
        raise ConfigurationError("gradcam needs a feature map on the gradient path")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(n), cls] = 1
    backward(sum_all(mul(logits, onehot)))
    grad = feat.grad if feat.grad is not None else np.zeros(feat.shape, feat.dtype)
    weights = grad.mean(axis=(2, 3))  # N x K
    combo = np.einsum("nk,nkhw->nhw", weights, feat.data)
    cam = minmax(upsample_to(np.maximum(combo, 0), images.shape[-1]))
    return CamResult(cam, "gradcam", cls, weights)


def topgap_cam(model, images: np.ndarray, class_idx) -> CamResult:
    """The network's own class map (Top-GAP disabled) as a CAM."""
    with no_grad():
        fmap = model.feature_map(Tensor(np.asarray(images))).data
    n = len(images)
    cls = np.broadcast_to(np.asarray(class_idx, dtype=np.int64), (n,)).copy()
    return CamResult(cam_mode(fmap, cls, images.shape[-1]), "ours", cls)


def _cam_values(cam) -> np.ndarray:
    return cam.cam if isinstance(cam, CamResult) else np.asarray(cam)


def cam_sparsity(cam) -> float:
    """Mean CAM value (the l1 norm per pixel, since CAMs are non-negative)."""
    v = _cam_values(cam)
    if v.size and (v.min() < 0 or v.max() > 1):
        raise NumericError("CAM values must lie in [0, 1]")
    return float(v.mean())


def cam_iou(cam, mask, threshold: float = 0.5, reduce: bool = True):
    """IoU of ``cam >= threshold`` with a binary mask; two empty sets score 1.

    Accepts single H x W maps or N x H x W batches; ``reduce`` averages
    over the batch.
    """
    v = _cam_values(cam)
    m = np.asarray(mask)
    if v.shape != m.shape:
        raise DataError(f"cam shape {v.shape} does not match mask shape {m.shape}")
    a = v >= threshold
    b = m.astype(bool)
    axes = (-2, -1)
    inter = (a & b).sum(axis=axes)
    union = (a | b).sum(axis=axes)
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return float(np.mean(iou)) if reduce else iou


def iou_threshold_sweep(cam, mask, thresholds=None) -> dict:
    thresholds = np.round(np.arange(0.1, 1.0, 0.1), 2) if thresholds is None else thresholds
    return {float(t): cam_iou(cam, mask, float(t)) for t in thresholds}


# --------------------------------------------------------------------------
# k sweep


@dataclass
class SweepRow:
    k: int
    k_normalized: float
    val_accuracy: float | None
    cam_l1: float | None
    robust_accuracy: float | None = None
    failed: str | None = None


@dataclass
class SweepReport:
    rows: list
    fused_size: int

    @property
    def ok_rows(self) -> list:
        return [r for r in self.rows if r.failed is None]

    @property
    def spearman(self) -> float:
        rows = self.ok_rows
        if len(rows) < 2:
            return float("nan")
        return float(spearmanr([r.k for r in rows], [r.cam_l1 for r in rows]).statistic)

    def best_k(self) -> int:
        rows = self.ok_rows
        if not rows:
            raise NumericError("every sweep run failed")
        best = max(r.val_accuracy for r in rows)
        return min(r.k for r in rows if r.val_accuracy == best)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=list(SweepRow.__dataclass_fields__))
        wr.writeheader()
        for r in self.rows:
            wr.writerow(asdict(r))
        return buf.getvalue()

    def trend_csv(self) -> str:
        lines = ["k_normalized,cam_l1"]
        lines += [f"{r.k_normalized!r},{r.cam_l1!r}" for r in self.ok_rows]
        return "\n".join(lines) + "\n"


def mean_cam_l1(params, dataset, batch_size: int = 256) -> float:
    """Mean sparsity of the network's own CAM for the true class over ``dataset``."""
    from .net.model import TopGapNetwork

    net = TopGapNetwork(params)
    vals = []
    for b in range(0, len(dataset), batch_size):
        sl = slice(b, b + batch_size)
        vals.append(topgap_cam(net, dataset.images[sl], dataset.labels[sl]).cam.mean(axis=(1, 2)))
    return float(np.concatenate(vals).mean())


def k_sweep(train_cfg, dataset, k_list, val=None, base=None) -> SweepReport:
    """Train (or fine-tune ``base``) one model per k with a shared seed.

    ``train_cfg`` is a :class:`topgap.experiment.RunConfig`. With ``base``
    given, every k starts from a copy of it and trains for
    ``train_cfg.finetune_epochs``. Failed runs are recorded, not raised.
    """
    from .data.split import split
    from .errors import TopGapError
    from .net import build_model, evaluate, train_model

    ks = [int(k) for k in k_list]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigurationError(f"k values must be strictly increasing, got {ks}")
    fused = train_cfg.backbone.feature_sizes()[0]
    if any(not 1 <= k <= fused * fused for k in ks):
        raise ConfigurationError(f"k values must lie in [1, {fused * fused}], got {ks}")
    if val is None:
        dataset, val = split(dataset, [1 - train_cfg.hyper.val_fraction, train_cfg.hyper.val_fraction],
                             True, train_cfg.seed)
    rows = []
    for k in ks:
        try:
            if base is not None:
                params = base.copy()
                params.head.k = k
                params.head.lam = train_cfg.head.lam
                epochs = train_cfg.finetune_epochs
            else:
                head = train_cfg.head_for(k)
                params = build_model(train_cfg.backbone, head, train_cfg.seed)
                epochs = train_cfg.epochs
            params, _ = train_model(params, dataset, epochs, train_cfg.batch_size, train_cfg.hyper,
                                    train_cfg.seed, val=val)
            rows.append(SweepRow(k, k / fused**2, evaluate(params, val)["acc"], mean_cam_l1(params, val)))
        except TopGapError as exc:
            rows.append(SweepRow(k, k / fused**2, None, None, failed=str(exc)))
    return SweepReport(rows, fused)
