"""Image-folder datasets: ``root/<class>/<id>.png`` with masks under ``root_masks``."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError
from .dataset import Dataset
from .shapes import u8_to_float

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")
CLASSES_FILE = "classes.txt"


def mask_root(root) -> Path:
    root = Path(root)
    return root.with_name(root.name + "_masks")


def read_image(path, size: int | None = None) -> np.ndarray:
    """Decode to float32 C x H x W in [0, 1]; bilinear resize when ``size`` differs."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return u8_to_float(arr.transpose(2, 0, 1))


def read_mask(path, size: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.NEAREST)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= 128).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    u8 = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, "RGB").save(path)


def write_gray(path, values: np.ndarray) -> None:
    """8-bit grayscale (PGM or PNG by suffix) from values in [0, 1]."""
    u8 = np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(u8, "L").save(path)


def load_folder(path, with_masks: bool = False, image_size: int | None = None,
                class_names=None) -> Dataset:
    """Load a class-per-subfolder tree; samples are ordered by id."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    if class_names is None:
        listing = root / CLASSES_FILE
        if listing.exists():
            class_names = [c for c in listing.read_text().split() if c]
        else:
            class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise DataError(f"no class subdirectories in {root}")
    entries = []
    for label, name in enumerate(class_names):
        cdir = root / name
        if not cdir.is_dir():
            raise DataError(f"class directory {cdir} missing")
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() in IMAGE_SUFFIXES:
                entries.append((f.stem, label, f))
    if not entries:
        raise DataError(f"no images found under {root}")
    entries.sort(key=lambda e: e[0])
    missing, unreadable = [], []
    images, masks = [], []
    for stem, label, f in entries:
        try:
            images.append(read_image(f, image_size))
        except DataError:
            unreadable.append(str(f))
            continue
        if with_masks:
            mpath = mask_root(root) / class_names[label] / f.name
            if not mpath.exists():
                candidates = list(mpath.parent.glob(stem + ".*")) if mpath.parent.is_dir() else []
                if not candidates:
                    missing.append(str(mpath))
                    continue
                mpath = candidates[0]
            masks.append(read_mask(mpath, images[-1].shape[-1]))
    if unreadable:
        raise DataError(f"unreadable image files: {unreadable}")
    if missing:
        raise DataError(f"missing mask files: {missing}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"images differ in size {sorted(shapes)}; pass image_size to resize")
    return Dataset(
        images=np.stack(images),
        labels=np.array([e[1] for e in entries]),
        masks=np.stack(masks) if with_masks else None,
        ids=[e[0] for e in entries],
        class_names=list(class_names),
        meta={"source": str(root)},
    )


def export_folder(dataset: Dataset, path) -> list:
    """Write ``dataset`` in the folder layout; returns written paths."""
    root = Path(path)
    written = []
    root.mkdir(parents=True, exist_ok=True)
    (root / CLASSES_FILE).write_text("\n".join(dataset.class_names) + "\n")
    written.append(root / CLASSES_FILE)
    for name in dataset.class_names:
        (root / name).mkdir(exist_ok=True)
        if dataset.has_masks:
            (mask_root(root) / name).mkdir(parents=True, exist_ok=True)
    for s in dataset:
        cname = dataset.class_names[s.label]
        p = root / cname / f"{s.id}.png"
        write_image(p, s.image)
        written.append(p)
        if s.mask is not None:
            mp = mask_root(root) / cname / f"{s.id}.png"
            Image.fromarray(s.mask * np.uint8(255), "L").save(mp)
            written.append(mp)
    return written
