"""Test-time adversarial correction from augmentation-induced embedding drift."""

from .config import RunConfig
from .defense import AtacParams, atac_predict, correct
from .embedding import cosine, drift_stats, normalize
from .harness import build_experiment, evaluate, roc_auc

__all__ = [
    "AtacParams",
    "RunConfig",
    "atac_predict",
    "build_experiment",
    "correct",
    "cosine",
    "drift_stats",
    "evaluate",
    "normalize",
    "roc_auc",
]
