"""Anchor-based metric alignment of monocular depth with learned basis maps."""
from .anchors import Anchor, AnchorRegime, AnchorSet, REGIMES, get_regime, sample_anchors
from .basis import align, recover_depth, ridge_solve
from .errors import AnchorDepthError
from .field import DepthMap
from .generator import GeneratorConfig, LossConfig
from .training import TrainConfig, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "Anchor", "AnchorDepthError", "AnchorRegime", "AnchorSet", "DepthMap", "GeneratorConfig",
    "LossConfig", "REGIMES", "TrainConfig", "align", "get_regime", "load_model", "recover_depth",
    "ridge_solve", "sample_anchors", "save_model", "train",
]
