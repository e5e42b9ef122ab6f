"""Learned orthogonal flows on function spaces.

A time-dependent, low-rank, skew-adjoint generator is integrated with a
Cayley scheme, which keeps the discretised flow exactly norm-preserving.
Variational objectives over a power-law prior on Fourier indices train the
generator so that the flow maps Fourier elements onto learned
orthonormal systems.
"""

from .cayley import TimeGrid, apply_q, integrate
from .errors import (
    CheckpointError,
    ConfigError,
    IntegrationError,
    NonFiniteGradientError,
    OrthoflowError,
    ShapeError,
    SingularMatrixError,
)
from .fields import GeneratorParams, MeanField
from .function_space import Domain, FourierIndex, IndexPrior, inner_product, sample_quadrature, uniform_grid

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "Domain",
    "FourierIndex",
    "GeneratorParams",
    "IndexPrior",
    "IntegrationError",
    "MeanField",
    "NonFiniteGradientError",
    "OrthoflowError",
    "ShapeError",
    "SingularMatrixError",
    "TimeGrid",
    "apply_q",
    "inner_product",
    "integrate",
    "sample_quadrature",
    "uniform_grid",
]
