"""Placement-aware masked-autoencoder pretraining for distributed sensing."""

from .autodiff import (
    ContractError,
    Parameter,
    ParamSet,
    Tape,
    Tensor,
    adam_step,
    backward,
    grad_check,
)
from .data import Dataset, SpatialLayout, SyntheticSample, TokenGrid
from .model import ModelConfig, SparModel, prepare_sample
from .synth import SynthConfig, make_dataset
from .train_eval import HeadConfig, Metrics, PretrainConfig, pretrain

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "Parameter",
    "ParamSet",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "grad_check",
    "Dataset",
    "SpatialLayout",
    "SyntheticSample",
    "TokenGrid",
    "ModelConfig",
    "SparModel",
    "prepare_sample",
    "SynthConfig",
    "make_dataset",
    "HeadConfig",
    "Metrics",
    "PretrainConfig",
    "pretrain",
    "__version__",
]
