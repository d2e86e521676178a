"""Projection-filter Bayesian update by Renyi-divergence Riemannian gradient flow."""

from .errors import NumericalFailure, ProjFilterError
from .expfam import BijectionParams, build_basis, gaussian_to_natural, natural_to_gaussian
from .posterior import make_posterior
from .quadrature import gauss_patterson_1d, smolyak_grid, unbounded_grid
from .renyi_update import UpdateConfig, update

__version__ = "0.1.0"

__all__ = [
    "BijectionParams",
    "NumericalFailure",
    "ProjFilterError",
    "UpdateConfig",
    "build_basis",
    "gauss_patterson_1d",
    "gaussian_to_natural",
    "make_posterior",
    "natural_to_gaussian",
    "smolyak_grid",
    "unbounded_grid",
    "update",
]
