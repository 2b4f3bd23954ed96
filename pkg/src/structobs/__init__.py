"""Structure-wise image-text alignment and report generation toolkit."""

__version__ = "0.1.0"

from .engine import Array, Tape, grad_check, no_grad  # noqa: F401
