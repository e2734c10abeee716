"""In-memory labelled image collections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError


@dataclass
class Sample:
    image: np.ndarray  # float32, C x H x W, values in [0, 1]
    label: int
    mask: np.ndarray | None = None  # uint8 {0,1}, H x W
    id: str = ""


@dataclass
class Dataset:
    """Batch-major arrays plus per-sample ids.

    ``extras`` holds optional per-sample side arrays (e.g. the background
    texture id of synthetic images) that subsets carry along.
    """

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None
    ids: list = field(default_factory=list)
    class_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be N x C x H x W, got shape {self.images.shape}")
        n = len(self.images)
        if self.labels.shape != (n,):
            raise DataError(f"{n} images but labels of shape {self.labels.shape}")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.uint8)
            if self.masks.shape != (n,) + self.images.shape[2:]:
                raise DataError(f"mask shape {self.masks.shape} does not match images {self.images.shape}")
        if not self.ids:
            self.ids = [f"{i:05d}" for i in range(n)]
        if len(self.ids) != n:
            raise DataError(f"{n} images but {len(self.ids)} ids")
        if not self.class_names:
            self.class_names = [str(c) for c in range(int(self.labels.max()) + 1 if n else 0)]
        if n and self.labels.max() >= self.num_classes:
            raise DataError(f"label {self.labels.max()} >= num_classes {self.num_classes}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def has_masks(self) -> bool:
        return self.masks is not None

    def sample(self, i: int) -> Sample:
        mask = None if self.masks is None else self.masks[i]
        return Sample(self.images[i], int(self.labels[i]), mask, self.ids[i])

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            masks=None if self.masks is None else self.masks[idx],
            ids=[self.ids[i] for i in idx],
            class_names=list(self.class_names),
            meta=dict(self.meta),
            extras={k: np.asarray(v)[idx] for k, v in self.extras.items()},
        )

    @classmethod
    def from_samples(cls, samples, class_names=None, meta=None) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise DataError("no samples")
        masks = [s.mask for s in samples]
        if any(m is None for m in masks):
            masks = None
        else:
            masks = np.stack(masks)
        return cls(
            images=np.stack([s.image for s in samples]),
            labels=np.array([s.label for s in samples]),
            masks=masks,
            ids=[s.id for s in samples],
            class_names=list(class_names or []),
            meta=dict(meta or {}),
        )

    def manifest(self) -> dict:
        return {
            "count": len(self),
            "class_names": list(self.class_names),
            "image_size": int(self.image_size),
            "samples": [
                {"id": i, "label": int(l), "mask": self.masks is not None}
                for i, l in zip(self.ids, self.labels)
            ],
            "config": self.meta,
        }
