"""Coronary hemodynamics at desk scale: synthetic vessel trees, CCTA-like
volumes, a reduced-order flow oracle, and an end-to-end learned surrogate."""

from .autodiff import Tensor, backward, clear_tape, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "clear_tape", "no_grad", "__version__"]
