"""Gradient-based meta-learning toolkit.

Ships a higher-order reverse-mode autodiff core, a two-headed MLP (shared
feature extractor, adaptable meta head, outer-loop-only co head), task
samplers for sinusoid regression and synthetic cluster classification, the
bilevel training/testing engine with MAML, CML, CL and NOISE variants,
gradient diagnostics, and a CLI experiment harness.
"""

from .autodiff import (  # noqa: F401
    Graph,
    GraphFrozenError,
    NonFiniteError,
    ShapeError,
    Tensor,
    detach,
    gradient,
    tensor,
)

__version__ = "0.1.0"
