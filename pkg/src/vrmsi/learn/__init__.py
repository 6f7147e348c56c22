"""Trainable encoder-decoder that restores full-resolution ACS-only bins."""

from vrmsi.learn.model import ModelConfig, UNet, loss_and_gradients
from vrmsi.learn.train import (
    Adam,
    NormStats,
    NumericalError,
    TrainConfig,
    denormalize,
    infer_full_stack,
    infer_zreplace,
    load_model,
    normalize_slice,
    save_history,
    save_model,
    train,
)

__all__ = [
    "Adam",
    "ModelConfig",
    "NormStats",
    "NumericalError",
    "TrainConfig",
    "UNet",
    "denormalize",
    "infer_full_stack",
    "infer_zreplace",
    "load_model",
    "loss_and_gradients",
    "normalize_slice",
    "save_history",
    "save_model",
    "train",
]
