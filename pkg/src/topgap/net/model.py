"""Forward pass, Top-GAP pooling, loss and CAM read-out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import (
    Tensor,
    add,
    batchnorm2d,
    conv2d,
    dropout,
    l1_mean,
    no_grad,
    relu,
    reshape,
    scale,
    softmax,
    softmax_ce,
    topk_mean,
    upsample_nearest,
)
from ..errors import ConfigurationError, ConstraintError, DataError
from .params import ModelParams


@dataclass
class ForwardOutput:
    feature_map: Tensor  # class map X^(n+1): N x classes x H1 x W1
    logits: Tensor  # N x classes
    topk_index: np.ndarray  # N x classes x k flat spatial indices
    features: list  # backbone maps used by the head, largest first


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    l1: float


def _conv_bn_relu(p: ModelParams, name: str, x: Tensor, stride: int, mode: str) -> Tensor:
    t = p.tensors
    y = conv2d(x, t[f"{name}.w"], None, stride=stride, pad=1 if stride == 1 else (0, 1))
    return relu(batchnorm2d(y, t[f"{name}.g"], t[f"{name}.b"], p.bn[name], mode))


def backbone_forward(params: ModelParams, images: Tensor, mode: str = "eval") -> list:
    """Residual conv stack; returns the last ``feature_maps_used`` stage outputs, largest first."""
    cfg = params.backbone
    if images.ndim != 4 or images.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise DataError(
            f"expected images N x {cfg.input_channels} x {cfg.input_size} x {cfg.input_size}, got {images.shape}"
        )
    x = _conv_bn_relu(params, "stem", images, 2, mode)
    outs = []
    t = params.tensors
    for s in range(cfg.num_stages):
        x = _conv_bn_relu(params, f"s{s}.down", x, 2, mode)
        for j in range(cfg.blocks_per_stage):
            name = f"s{s}.b{j}"
            y = conv2d(x, t[f"{name}.w"], None, stride=1, pad=1)
            y = batchnorm2d(y, t[f"{name}.g"], t[f"{name}.b"], params.bn[name], mode)
            x = relu(add(x, y))
        outs.append(x)
    return outs[cfg.num_stages - cfg.feature_maps_used :]


def fpn_head(params: ModelParams, features: list, mode: str = "eval", dropout_seed: int | None = None) -> Tensor:
    """Per-level 3x3 conv, nearest upsample to the largest map, sum, dropout, 1x1 class conv."""
    t = params.tensors
    target = features[0].shape[-1]
    fused = None
    for lvl, f in enumerate(features):
        w = t[f"fpn{lvl}.w"]
        if f.shape[1] != w.shape[1]:
            raise ConfigurationError(f"FPN level {lvl}: feature has {f.shape[1]} channels, conv expects {w.shape[1]}")
        y = conv2d(f, w, t[f"fpn{lvl}.b"], stride=1, pad=1)
        factor = target // f.shape[-1]
        if factor * f.shape[-1] != target:
            raise ConfigurationError(f"FPN level {lvl} size {f.shape[-1]} does not divide {target}")
        y = upsample_nearest(y, factor)
        fused = y if fused is None else add(fused, y)
    fused = dropout(fused, params.head.dropout_rate, dropout_seed, train=(mode == "train"))
    return conv2d(fused, t["cls.w"], t["cls.b"], stride=1, pad=0)


def top_gap_pool(x: Tensor, k: int):
    """Per-channel mean of the ``k`` largest spatial values; returns ``(logits, indices)``."""
    n, c, h, w = x.shape
    if int(k) != k or not 1 <= k <= h * w:
        raise ConstraintError(f"k must satisfy 1 <= k <= H1*W1 = {h * w}, got {k}")
    return topk_mean(reshape(x, (n, c, h * w)), int(k), return_indices=True)


def forward(params: ModelParams, images: Tensor, mode: str = "eval", k: int | None = None,
            dropout_seed: int | None = None) -> ForwardOutput:
    feats = backbone_forward(params, images, mode)
    fmap = fpn_head(params, feats, mode, dropout_seed)
    logits, idx = top_gap_pool(fmap, params.head.k if k is None else k)
    return ForwardOutput(fmap, logits, idx, feats)


def model_loss(out: ForwardOutput, labels, lam: float) -> LossTerms:
    """``lam * mean|X| + CE(softmax(Top-GAP(X)), labels)``."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    ce = softmax_ce(out.logits, labels)
    if lam == 0:
        return LossTerms(ce, float(ce.data), float(np.abs(out.feature_map.data).mean()))
    l1 = l1_mean(out.feature_map)
    total = add(ce, scale(l1, lam))
    return LossTerms(total, float(ce.data), float(l1.data))


def minmax(values: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Min-max scale to [0, 1] over ``axes``; constant maps become zeros."""
    lo = values.min(axis=axes, keepdims=True)
    hi = values.max(axis=axes, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1)
    return np.where(span > 0, (values - lo) / safe, 0).astype(values.dtype, copy=False)


def upsample_to(maps: np.ndarray, target_size: int) -> np.ndarray:
    """Nearest upsampling of N x H x W maps to ``target_size`` squared."""
    h = maps.shape[-1]
    factor = target_size // h
    if factor * h != target_size:
        raise ConfigurationError(f"map size {h} does not divide target size {target_size}")
    return maps.repeat(factor, axis=-2).repeat(factor, axis=-1)


def cam_mode(x, class_idx, target_size: int) -> np.ndarray:
    """Class-channel CAM: select, upsample to ``target_size``, min-max scale per image.

    ``class_idx`` is an int or one index per sample; returns N x S x S.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    n, c = data.shape[:2]
    cls = np.broadcast_to(np.asarray(class_idx, dtype=np.int64), (n,))
    if np.any(cls < 0) or np.any(cls >= c):
        raise ConfigurationError(f"class index out of range [0, {c})")
    chan = data[np.arange(n), cls]
    return minmax(upsample_to(chan, target_size))


class TopGapNetwork:
    """Frozen (eval-mode) view of a parameter set used by attacks and diagnostics.

    Exposes ``forward`` (logits), ``feature_map`` (class map) and
    ``forward_features`` (backbone maps plus logits) on Tensors.
    """

    def __init__(self, params: ModelParams, k: int | None = None):
        # same arrays, but no weight gradients: attacks and maps only need d/d input
        self.params = ModelParams(
            params.backbone, params.head,
            tensors={n: Tensor(t.data) for n, t in params.tensors.items()},
            bn=params.bn, seed=params.seed, metrics=params.metrics,
        )
        self.k = params.head.k if k is None else k

    @property
    def num_classes(self) -> int:
        return self.params.head.num_classes

    @property
    def input_size(self) -> int:
        return self.params.backbone.input_size

    def run(self, x: Tensor) -> ForwardOutput:
        return forward(self.params, x, mode="eval", k=self.k)

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x).logits

    def feature_map(self, x: Tensor) -> Tensor:
        feats = backbone_forward(self.params, x, "eval")
        return fpn_head(self.params, feats, "eval")

    def forward_features(self, x: Tensor):
        out = self.run(x)
        return out.features, out.logits

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.forward(Tensor(images[i : i + batch_size])).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.num_classes), np.float32)

    __call__ = logits


def predict(params: ModelParams, images: np.ndarray, k: int | None = None, batch_size: int = 256):
    """Return ``(labels, probabilities)``; ties go to the lowest class index."""
    logits = TopGapNetwork(params, k).logits(np.asarray(images, dtype=params.dtype), batch_size)
    probs = softmax(logits.astype(np.float64))
    return probs.argmax(axis=1), probs


def feature_maps(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    net = TopGapNetwork(params)
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(net.feature_map(Tensor(images[i : i + batch_size])).data)
    return np.concatenate(outs)
