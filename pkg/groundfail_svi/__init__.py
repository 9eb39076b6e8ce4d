"""Variational Bayesian updating of ground-failure and building-damage maps."""

from groundfail_svi.model_core import HyperParams, LocationRecord, WeightSet
from groundfail_svi.inference import InferenceResult, run_inference

__version__ = "0.1.0"

__all__ = ["HyperParams", "InferenceResult", "LocationRecord", "WeightSet", "run_inference", "__version__"]
