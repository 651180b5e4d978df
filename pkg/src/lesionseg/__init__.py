"""Per-lesion retinal segmentation: imbalance-aware losses, a compact U-Net,
challenge-style Dice/F1/Rank evaluation and a synthetic fundus dataset."""

from .lesions import LESION_ORDER, LesionType
from .losses import LossSpec, compute_focal_alphas, compute_pos_weights, dice_loss, focal_loss, tversky_loss, weighted_bce_loss
from .metrics import MetricsReport, aggregate, dice_per_image, evaluate_masks, f1_over_images, rank
from .model import SegModel, build, load_weights, save_weights
from .synth import SynthSpec, generate, imbalance_stats
from .trainer import TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "LESION_ORDER",
    "LesionType",
    "LossSpec",
    "MetricsReport",
    "SegModel",
    "SynthSpec",
    "TrainConfig",
    "aggregate",
    "build",
    "compute_focal_alphas",
    "compute_pos_weights",
    "dice_loss",
    "dice_per_image",
    "evaluate",
    "evaluate_masks",
    "f1_over_images",
    "focal_loss",
    "generate",
    "imbalance_stats",
    "load_weights",
    "predict",
    "rank",
    "save_weights",
    "train",
    "tversky_loss",
    "weighted_bce_loss",
]
