"""From-scratch differentiable forecasting models and their optimizer.

Everything trains on flat parameter vectors (`ParamVector`) so that the
federation, clipping and secure-aggregation layers can treat model updates
as plain numeric vectors.
"""

from .models import ModelSpec, build_model, glorot_init
from .optim import AdamState, TrainConfig, adam_step
from .params import ParamLayout, ParamVector, load_params, save_params
from .training import BatchStream, ClientTrainer, early_stopper, train_local

__all__ = [
    "AdamState",
    "BatchStream",
    "ClientTrainer",
    "ModelSpec",
    "ParamLayout",
    "ParamVector",
    "TrainConfig",
    "adam_step",
    "build_model",
    "early_stopper",
    "glorot_init",
    "load_params",
    "save_params",
    "train_local",
]
