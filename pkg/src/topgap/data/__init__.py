"""Datasets, synthesis, splits and checkpoint persistence."""

from .dataset import Dataset, Sample
from .split import kfold, kfold_indices, split, split_indices
from .shapes import SHAPES, ShapesConfig, gen_shapes
from .folder import export_folder, load_folder, mask_root, read_image, read_mask, write_gray, write_image
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "Dataset", "Sample", "SHAPES", "ShapesConfig", "decode_checkpoint", "encode_checkpoint",
    "export_folder", "gen_shapes", "kfold", "kfold_indices", "load_checkpoint", "load_folder", "mask_root",
    "read_image", "read_mask", "save_checkpoint", "split", "split_indices", "write_gray", "write_image",
]
