"""Synergic adversarial label learning on a from-scratch numpy autodiff engine."""

from . import autodiff, calibration, experiments, interpretability, network, pipeline, synthetic

__version__ = "0.1.0"

__all__ = ["autodiff", "calibration", "experiments", "interpretability", "network", "pipeline", "synthetic"]
