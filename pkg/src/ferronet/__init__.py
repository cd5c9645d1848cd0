"""Numpy ResNet18 training with patch-permutation augmentation and channel-dispersion losses."""

from .errors import CheckpointError, ConfigError, ContractError, DataError, NumericalError
from .losses import LossBreakdown, LossConfig, loss_feature, loss_mean, loss_std, total_loss
from .models import ModelConfig, ResNet18, build_improved_resnet18, build_model, build_resnet18, param_count
from .permute import enumerate_permutations, expand_offline
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, run_ablation

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "DataError", "NumericalError",
    "LossBreakdown", "LossConfig", "loss_feature", "loss_mean", "loss_std", "total_loss",
    "ModelConfig", "ResNet18", "build_improved_resnet18", "build_model", "build_resnet18", "param_count",
    "enumerate_permutations", "expand_offline", "Tensor", "no_grad",
    "TrainConfig", "evaluate", "run_ablation",
]
