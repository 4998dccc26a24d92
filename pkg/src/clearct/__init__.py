"""Lesion-enhanced contrastive pretraining and attention-based MIL for CT volumes."""

from .config import ConfigError, RunConfig
from .contrastive import ContrastiveConfig, PretrainState, info_nce, lecl_loss, run_pretraining
from .ctio import ManifestEntry, SyntheticSpec, Volume, apply_window, generate_synthetic, get_window
from .estimators import ABMILClassifier, LeCLPretrainer
from .harness import make_splits, train_downstream
from .metrics import MetricsReport, auc, auprc, f1
from .nn import Encoder, EncoderConfig

__version__ = "0.1.0"

__all__ = [
    "ABMILClassifier",
    "ConfigError",
    "ContrastiveConfig",
    "Encoder",
    "EncoderConfig",
    "LeCLPretrainer",
    "ManifestEntry",
    "MetricsReport",
    "PretrainState",
    "RunConfig",
    "SyntheticSpec",
    "Volume",
    "apply_window",
    "auc",
    "auprc",
    "f1",
    "generate_synthetic",
    "get_window",
    "info_nce",
    "lecl_loss",
    "make_splits",
    "run_pretraining",
    "train_downstream",
]
