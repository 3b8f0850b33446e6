"""Desk-scale adversarial training laboratory."""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend
from .attacks import AttackSpec, PerturbationBatch
from .nn import Batch, Model, build_model
from .training import MetricsRecord, TrainConfig

__all__ = ["AttackSpec", "Batch", "Model", "MetricsRecord",
           "PerturbationBatch", "TrainConfig", "build_model",
           "kernel_backend", "__version__"]
