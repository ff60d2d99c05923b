"""Dual-stream CNN for distinguishing computer-generated graphics from
photographs, implemented from scratch on numpy with verified gradients."""

from .model import ModelConfig, DualStreamModel, build_model, ablation_variant
from .params import SgdConfig, ParamStore, sgd_step, learning_rate
from .srm import load_bank, apply_bank
from .data import Manifest, Metrics, accuracy, split_manifest, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "DualStreamModel", "build_model", "ablation_variant",
    "SgdConfig", "ParamStore", "sgd_step", "learning_rate",
    "load_bank", "apply_bank",
    "Manifest", "Metrics", "accuracy", "split_manifest", "generate_synthetic",
    "__version__",
]
