"""Adaptive kernel predictors for feature-learning infinite-width networks."""
from .core import (Activation, Dataset, Hyperparams, KernelKind, KernelMatrix,
                   KernelStack, PatchLayout, PredictorResult, data_gram,
                   kernel_alignment, kernel_ridge_predict, r2_score)
from .sampling import SamplerConfig

__version__ = "0.1.0"
