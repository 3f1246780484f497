"""Multi-lot parking availability forecasting with multimodal demand and masked pretraining."""

from .features import FeatureConfig
from .finetune import TrainConfig, TuneStrategy, finetune, predict
from .model import ModelConfig, SSTModel
from .pipeline import SynthConfig, make_windows, prepare_synthetic, synth_generate
from .ssl import MaskSpec, pretrain

__all__ = [
    "FeatureConfig",
    "MaskSpec",
    "ModelConfig",
    "SSTModel",
    "SynthConfig",
    "TrainConfig",
    "TuneStrategy",
    "finetune",
    "make_windows",
    "predict",
    "prepare_synthetic",
    "pretrain",
    "synth_generate",
]

__version__ = "0.1.0"
