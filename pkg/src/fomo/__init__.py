"""Adversarial training with periodic forgetting, relearning and EMA consolidation."""

from .attacks import AttackConfig, attack_presets, pgd, project
from .data import Dataset, corrupt, load_idx, make_synthetic, split
from .errors import ConfigError, ContractError, DimensionError, FormatError, RefusalError
from .evaluate import (EvalReport, ablation_sweep, accuracy, corruption_eval, epsilon_sweep,
                       flatness_probe, tradeoff)
from .forgetting import (FomoSchedule, ResetMask, apply_forgetting, chance_accuracy, consistency_loss,
                         consolidate, fomo_loss, sample_reset_mask)
from .model import MLP, StableModel, clone_parameters, forward, init_mlp
from .tensor import (Tape, Tensor, affine, backward, get_precision, kl_divergence, relu, set_precision,
                     sgd_step, softmax_cross_entropy)
from .train import EpochRecord, TrainConfig, lr_at, run, train_epoch

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "attack_presets", "pgd", "project",
    "Dataset", "corrupt", "load_idx", "make_synthetic", "split",
    "ConfigError", "ContractError", "DimensionError", "FormatError", "RefusalError",
    "EvalReport", "ablation_sweep", "accuracy", "corruption_eval", "epsilon_sweep", "flatness_probe", "tradeoff",
    "FomoSchedule", "ResetMask", "apply_forgetting", "chance_accuracy", "consistency_loss", "consolidate",
    "fomo_loss", "sample_reset_mask",
    "MLP", "StableModel", "clone_parameters", "forward", "init_mlp",
    "Tape", "Tensor", "affine", "backward", "get_precision", "kl_divergence", "relu", "set_precision", "sgd_step",
    "softmax_cross_entropy",
    "EpochRecord", "TrainConfig", "lr_at", "run", "train_epoch",
]
