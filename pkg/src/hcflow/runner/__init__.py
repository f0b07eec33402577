"""Training, checkpoints and the command-line interface."""

from .checkpoint import load_checkpoint, read_archive, save_checkpoint, write_archive
from .config import TrainConfig, config_from_text, load_config
from .train import TrainResult, train

__all__ = [
    "TrainConfig", "TrainResult", "config_from_text", "load_checkpoint", "load_config",
    "read_archive", "save_checkpoint", "train", "write_archive",
]
