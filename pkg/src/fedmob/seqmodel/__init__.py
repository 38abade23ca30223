"""Onboard learner: tokenisation, transformer encoder, training."""
from .bundle import WeightBundle, load_bundle, save_bundle
from .estimator import ChargeLocationClassifier
from .network import EncoderNet, ModelConfig
from .encoding import Samples, TokenizerConfig, battery_bucket, build_samples, encode_sequence
from .training import OptimizerConfig, SampleBatch, TrainHistory, evaluate, predict, train_local

__all__ = [
    "ChargeLocationClassifier", "EncoderNet", "ModelConfig", "OptimizerConfig",
    "SampleBatch", "Samples", "TokenizerConfig", "TrainHistory", "WeightBundle",
    "battery_bucket", "build_samples", "encode_sequence", "evaluate", "load_bundle",
    "predict", "save_bundle", "train_local",
]
