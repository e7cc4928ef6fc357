"""LSTM sequence classifiers with cross-modal weight sharing."""

from .dataset import SequencePool, SynthConfig, synth_generate
from .lstm import LstmParams
from .multimodal import MultimodalParams, SharingVariant
from .trainer import TrainConfig, train

__version__ = "0.1.0"
__all__ = ["LstmParams", "MultimodalParams", "SequencePool", "SharingVariant", "SynthConfig",
           "TrainConfig", "synth_generate", "train"]
