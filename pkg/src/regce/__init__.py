"""Noise-robust cross-entropy training lab on a small numpy autodiff core."""
from .models import Model, ModelSpec, build_model, forward
from .noise import NoiseSpec, NoisyDataset
from .semi import MixMatchSpec, run_regce_semi
from .trainer import TrainConfig, evaluate, run_regce

__all__ = [
    "Model", "ModelSpec", "build_model", "forward", "NoiseSpec", "NoisyDataset",
    "MixMatchSpec", "run_regce_semi", "TrainConfig", "evaluate", "run_regce",
]
__version__ = "0.1.0"
