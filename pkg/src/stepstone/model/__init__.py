"""Neural correlator: FEN, losses, heads, chain-length regressor, training."""

from .chainlen import ChainLenCNN, ChainLenConfig, chainlen_forward, train_chainlen
from .fen import FEN, ChainHead, CorrelationHead, FenConfig
from .training import ModelBundle, TrainConfig, fit_bundle, load_checkpoint, save_checkpoint

__all__ = [
    "FEN", "ChainHead", "ChainLenCNN", "ChainLenConfig", "CorrelationHead", "FenConfig",
    "ModelBundle", "TrainConfig", "chainlen_forward", "fit_bundle", "load_checkpoint",
    "save_checkpoint", "train_chainlen",
]
