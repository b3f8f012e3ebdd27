"""Funnel-safeguarded, data-driven predictive control.

A model-free funnel controller keeps the tracking error inside a prescribed
boundary while a learned predictive controller (DeePC for LTI plants,
EDMD-based MPC for control-affine plants) does the actual tracking.
"""
from .errors import SafePCError

__version__ = "0.1.0"

__all__ = ["SafePCError", "__version__"]
