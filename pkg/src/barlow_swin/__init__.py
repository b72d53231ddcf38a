"""Shifted-window transformer encoder with a convolutional U-Net decoder for binary segmentation,
pretrained with a redundancy-reduction objective, on a small numpy autodiff engine."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .decoder import BarlowSwin, DecoderConfig, UNetDecoder
from .encoder import EncoderConfig, SwinEncoder
from .exceptions import CheckpointError, ConfigError, DataError
from .losses import BtLossConfig, Projector, ProjectorConfig, SegLossConfig
from .metrics import MetricsReport, compute_metrics
from .tensor import Tensor
from .training import AugmentSpec, TrainConfig, evaluate, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec",
    "BarlowSwin",
    "BtLossConfig",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DecoderConfig",
    "EncoderConfig",
    "MetricsReport",
    "Projector",
    "ProjectorConfig",
    "RunConfig",
    "SegLossConfig",
    "SwinEncoder",
    "Tensor",
    "TrainConfig",
    "UNetDecoder",
    "compute_metrics",
    "evaluate",
    "finetune",
    "load_checkpoint",
    "load_config",
    "pretrain",
    "save_checkpoint",
]
