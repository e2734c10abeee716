"""The Top-GAP classification network: backbone, FPN-lite head, pooling, loss, training."""

from .params import BackboneConfig, HeadConfig, ModelParams, build_model
from .model import (
    ForwardOutput,
    LossTerms,
    TopGapNetwork,
    backbone_forward,
    cam_mode,
    feature_maps,
    forward,
    fpn_head,
    minmax,
    model_loss,
    predict,
    top_gap_pool,
    upsample_to,
)
from .train import TrainHyper, TrainLog, evaluate, train_model

__all__ = [
    "BackboneConfig", "ForwardOutput", "HeadConfig", "LossTerms", "ModelParams", "TopGapNetwork",
    "TrainHyper", "TrainLog", "backbone_forward", "build_model", "cam_mode", "evaluate",
    "feature_maps", "forward", "fpn_head", "minmax", "model_loss", "predict", "top_gap_pool",
    "train_model", "upsample_to",
]
