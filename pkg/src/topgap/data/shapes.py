"""Seeded synthetic shapes on class-correlated backgrounds.

Each image holds one hard-edged shape whose type is the label. The
background texture agrees with the label with probability ``bias``, which
gives the classifier a spurious shortcut; the test split always uses
``bias = 1 / num_classes`` so the shortcut carries no information there.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigurationError
from .dataset import Dataset

SHAPES = ("disc", "square", "triangle", "cross")

# base colour and stripe orientation per background texture id
_TEXTURE_COLORS = np.array(
    [
        [0.62, 0.30, 0.26],
        [0.28, 0.56, 0.30],
        [0.26, 0.34, 0.64],
        [0.60, 0.56, 0.24],
    ],
    dtype=np.float64,
)
_TEXTURE_AMPLITUDE = 0.10
_NOISE_STD = 0.03

# largest area fraction of the unit square each shape can occupy while fully inside it
_MAX_FIT = {"disc": math.pi / 4, "square": 1.0, "triangle": math.sqrt(3) / 4, "cross": 5 / 9}


@dataclass
class ShapesConfig:
    count: int = 1000
    image_size: int = 64
    num_classes: int = 4
    area_fraction: tuple = (0.04, 0.12)
    background: str = "textures"
    bias: float = 0.95
    seed: int = 0
    test_count: int | None = None

    def validate(self) -> None:
        lo, hi = self.area_fraction
        if self.count < 0 or (self.test_count is not None and self.test_count < 0):
            raise ConfigurationError("sample counts must be non-negative")
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ConfigurationError(f"num_classes must lie in [2, {len(SHAPES)}], got {self.num_classes}")
        if not 0.0 <= self.bias <= 1.0:
            raise ConfigurationError(f"bias must lie in [0, 1], got {self.bias}")
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigurationError(f"area_fraction must satisfy 0 < lo <= hi < 1, got {self.area_fraction}")
        if self.background not in ("noise", "textures"):
            raise ConfigurationError(f"unknown background kind {self.background!r}")
        pixels = self.image_size**2
        if hi * pixels < 4:
            raise ConfigurationError(
                f"area_fraction {self.area_fraction} leaves fewer than 4 object pixels at size {self.image_size}"
            )
        for name in SHAPES[: self.num_classes]:
            if lo > 0.9 * _MAX_FIT[name]:
                raise ConfigurationError(
                    f"a {name} covering {lo:.3f} of the image cannot fit inside {self.image_size}px"
                )


def _rasterize(kind: str, size: float, cy: float, cx: float, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= (size / 2) ** 2
    if kind == "square":
        return (np.abs(dy) <= size / 2) & (np.abs(dx) <= size / 2)
    if kind == "triangle":
        h = size * math.sqrt(3) / 2
        top = -h / 2
        rel = dy - top  # 0 at apex, h at base
        return (rel >= 0) & (rel <= h) & (np.abs(dx) <= rel / math.sqrt(3))
    if kind == "cross":
        t = size / 3
        return ((np.abs(dy) <= size / 2) & (np.abs(dx) <= t / 2)) | (
            (np.abs(dx) <= size / 2) & (np.abs(dy) <= t / 2)
        )
    raise ValueError(kind)


def _size_for_area(kind: str, area: float) -> float:
    """Extent (bounding-box side) giving roughly ``area`` pixels."""
    if kind == "disc":
        return 2 * math.sqrt(area / math.pi)
    if kind == "square":
        return math.sqrt(area)
    if kind == "triangle":
        return math.sqrt(area * 4 / math.sqrt(3))
    return math.sqrt(area * 9 / 5)


def _background(rng, texture: int, n: int, kind: str) -> np.ndarray:
    color = _TEXTURE_COLORS[texture]
    img = np.broadcast_to(color[:, None, None], (3, n, n)).copy()
    if kind == "textures":
        period = rng.uniform(5.0, 9.0)
        phase = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
        coord = (yy, xx, (xx + yy) / math.sqrt(2), None)[texture]
        if coord is None:
            wave = np.sign(np.sin(2 * math.pi * xx / period + phase) * np.sin(2 * math.pi * yy / period + phase))
        else:
            wave = np.sin(2 * math.pi * coord / period + phase)
        img += _TEXTURE_AMPLITUDE * wave
        noise = _NOISE_STD
    else:
        noise = 2 * _NOISE_STD
    return img + rng.normal(0.0, noise, size=(3, n, n))


def _object_color(rng, bg_color: np.ndarray) -> np.ndarray:
    for _ in range(100):
        c = rng.uniform(0.05, 1.0, size=3)
        if np.abs(c - bg_color).sum() >= 0.6:
            return c
    return 1.0 - bg_color


def _render(cfg: ShapesConfig, rng, label: int, bias: float):
    n = cfg.image_size
    if rng.random() < bias:
        texture = label
    else:
        others = [t for t in range(cfg.num_classes) if t != label]
        texture = int(others[rng.integers(len(others))])
    kind = SHAPES[label]
    lo, hi = cfg.area_fraction
    for _ in range(200):
        area = rng.uniform(lo, hi) * n * n
        size = _size_for_area(kind, area)
        half = size / 2
        if size > n - 1:
            continue
        cy = rng.uniform(half + 0.5, n - half - 0.5)
        cx = rng.uniform(half + 0.5, n - half - 0.5)
        mask = _rasterize(kind, size, cy, cx, n)
        frac = mask.sum() / (n * n)
        if lo <= frac <= hi:
            break
    else:
        raise ConfigurationError(f"could not place a {kind} within area bounds {cfg.area_fraction}")
    img = _background(rng, texture, n, cfg.background)
    color = _object_color(rng, _TEXTURE_COLORS[texture])
    img = np.where(mask[None], color[:, None, None] + rng.normal(0.0, _NOISE_STD, size=(3, n, n)), img)
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return u8, mask.astype(np.uint8), texture


def _generate(cfg: ShapesConfig, count: int, bias: float, split_code: int, prefix: str) -> Dataset:
    n = cfg.image_size
    images = np.empty((count, 3, n, n), dtype=np.uint8)
    masks = np.empty((count, n, n), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    textures = np.empty(count, dtype=np.int64)
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, split_code, i])
        labels[i] = i % cfg.num_classes  # balanced classes
        images[i], masks[i], textures[i] = _render(cfg, rng, int(labels[i]), bias)
    meta = asdict(cfg)
    meta["area_fraction"] = list(cfg.area_fraction)
    meta["split_bias"] = bias
    return Dataset(
        images=u8_to_float(images),
        labels=labels,
        masks=masks,
        ids=[f"{prefix}-{i:05d}" for i in range(count)],
        class_names=list(SHAPES[: cfg.num_classes]),
        meta=meta,
        extras={"texture": textures},
    )


def u8_to_float(arr: np.ndarray) -> np.ndarray:
    """The one uint8 -> float32 conversion used everywhere (exact round trips)."""
    return arr.astype(np.float32) / np.float32(255.0)


def gen_shapes(cfg: ShapesConfig) -> tuple:
    """Return ``(train, test)``; the test split is background-decorrelated.

    ``test_count`` defaults to a quarter of ``count``.
    """
    cfg.validate()
    test_count = cfg.count // 4 if cfg.test_count is None else cfg.test_count
    train = _generate(cfg, cfg.count, cfg.bias, 0, "train")
    test = _generate(cfg, test_count, 1.0 / cfg.num_classes, 1, "test")
    return train, test
