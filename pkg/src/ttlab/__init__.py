"""Desk-scale lab for feedback-driven test-time training.

A self-contained toy transformer with its own reverse-mode autodiff engine,
verifiable synthetic tasks, test-time scaling baselines, a feedback-driven
test-time tuning loop, and a learned gradient-space update predictor, plus a
reproducible experiment harness (see the ``ttlab`` CLI).
"""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
