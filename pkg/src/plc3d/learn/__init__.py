from .losses import (
    LOSSES,
    LossInstance,
    LossResult,
    clip_style_loss,
    finite_diff_check,
    pdc_loss,
    region_weights,
    rpdc_loss,
    supervised_ce_loss,
)
from .model import ModelParams, encode_points, init_params, load_params, save_params
from .train import TrainConfig, TrainingData, train

__all__ = [
    "LOSSES",
    "LossInstance",
    "LossResult",
    "ModelParams",
    "TrainConfig",
    "TrainingData",
    "clip_style_loss",
    "encode_points",
    "finite_diff_check",
    "init_params",
    "load_params",
    "pdc_loss",
    "region_weights",
    "rpdc_loss",
    "save_params",
    "supervised_ce_loss",
    "train",
]
