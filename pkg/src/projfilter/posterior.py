"""Measurement models and the Bayes posterior q = p_prior exp(-l - Z)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import MeasurementInconsistencyError, SingularMeasurementError
from .expfam import BijectionParams, NodeStatistics, StatisticsBasis, log_partition
from .quadrature import SparseGrid

LINEAR_IN_C = "linear_in_c"
ADDITIVE_GAUSSIAN = "additive_gaussian"
CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class LikelihoodModel:
    """Negative log-likelihood ``l(x, y)``, vectorized over rows of x.

    Additive constants in ``l`` are allowed; they cancel between Z and q.
    """

    kind: str
    nll: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = ""
    h: Optional[Callable[[np.ndarray], np.ndarray]] = None
    R: Optional[np.ndarray] = None
    theta_ell: Optional[np.ndarray] = None
    basis: Optional[StatisticsBasis] = None
    params: dict = field(default_factory=dict)

    def __call__(self, x, y) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.nll(x, np.asarray(y, dtype=float)), dtype=float).reshape(-1)


def linear_in_c_model(basis: StatisticsBasis, theta_ell, name="linear-in-c") -> LikelihoodModel:
    """Conjugate model with ``l(x, y) = c(x)^T theta_ell``.

    The measurement is already folded into ``theta_ell``; ``y`` is ignored.
    """
    theta_ell = np.asarray(theta_ell, dtype=float)

    def nll(x, y):
        return basis.evaluate(x) @ theta_ell

    return LikelihoodModel(LINEAR_IN_C, nll, name=name, theta_ell=theta_ell, basis=basis)


def additive_gaussian_model(h, R, name="additive-gaussian", params=None) -> LikelihoodModel:
    """``l(x, y) = 0.5 (y - h(x))^T R^-1 (y - h(x))``."""
    R = np.atleast_2d(np.asarray(R, dtype=float))
    R_inv = np.linalg.inv(R)

    def nll(x, y):
        r = y - h(x)
        return 0.5 * np.einsum("ni,ij,nj->n", r, R_inv, r)

    return LikelihoodModel(ADDITIVE_GAUSSIAN, nll, name=name, h=h, R=R, params=params or {})


def linear_gaussian_model(H, R, name="linear-gaussian") -> LikelihoodModel:
    """Additive-Gaussian model with linear ``h(x) = H x``."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    return additive_gaussian_model(lambda x: x @ H.T, R, name=name, params={"H": H.tolist()})


def gaussian_likelihood_natural(basis: StatisticsBasis, H, R, y) -> np.ndarray:
    """``theta_ell`` with ``c^T theta_ell = 0.5 (y - Hx)^T R^-1 (y - Hx)`` up to a constant."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R_inv = np.linalg.inv(np.atleast_2d(np.asarray(R, dtype=float)))
    A = H.T @ R_inv @ H
    b = H.T @ R_inv @ np.atleast_1d(np.asarray(y, dtype=float))
    theta = np.zeros(basis.m)
    theta[basis.first_order] = -b
    for i in range(basis.dim):
        theta[basis.second_order[i, i]] = 0.5 * A[i, i]
        for j in range(i + 1, basis.dim):
            theta[basis.second_order[i, j]] = A[i, j]
    return theta


def custom_model(fn, name="custom", params=None) -> LikelihoodModel:
    return LikelihoodModel(CUSTOM, fn, name=name, params=params or {})


def example_a_model(sigma_y: float = 0.5) -> LikelihoodModel:
    """Componentwise-sine likelihood ``0.5 |sin(x - y) / sigma_y|^2`` (multimodal posterior)."""

    def nll(x, y):
        return 0.5 * np.sum((np.sin(x - y) / sigma_y) ** 2, axis=1)

    return custom_model(nll, name="example-a", params={"sigma_y": sigma_y})


def range_bearing_h(x: np.ndarray, z0: float = 0.2) -> np.ndarray:
    """Range, azimuth and elevation of a target at (x1, x2, z0).

    The azimuth is the scalar principal value ``atan(x1 / x2)``, not atan2.
    """
    x = np.atleast_2d(x)
    rho = np.hypot(x[:, 0], x[:, 1])
    if np.any(rho == 0.0):
        raise SingularMeasurementError("range-bearing measurement undefined at |x| = 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        azimuth = np.arctan(x[:, 0] / x[:, 1])
    return np.column_stack([np.sqrt(rho**2 + z0**2), azimuth, np.arctan(z0 / rho)])


def example_b_model(z0: float = 0.2, R=(2e-2, 4e-1, 4e-1), r_as_std: bool = True) -> LikelihoodModel:
    """Range/azimuth/elevation tracking measurement with additive Gaussian noise.

    With ``r_as_std`` the entries of ``R`` are noise standard deviations, so
    the noise covariance is ``diag(R)**2``; otherwise they are variances.
    """
    R = np.asarray(R, dtype=float)
    R = np.diag(R**2 if r_as_std else R)

    def h(x):
        return range_bearing_h(x, z0)

    return additive_gaussian_model(h, R, name="example-b", params={"z0": z0, "R_diag": np.diag(R).tolist(), "r_as_std": r_as_std})


def builtin_models() -> dict[str, LikelihoodModel]:
    return {"example-a": example_a_model(), "example-b": example_b_model()}


@dataclass(frozen=True, eq=False)
class PosteriorSpec:
    """Prior natural parameters, the bijection covering the prior, y and the model.

    ``Z`` and ``psi_prior`` are filled in by :func:`prepare`.
    """

    basis: StatisticsBasis
    prior: np.ndarray
    prior_xi: BijectionParams
    y: np.ndarray
    model: LikelihoodModel
    Z: Optional[float] = None
    psi_prior: Optional[float] = None

    def prior_statistics(self, grid: SparseGrid) -> NodeStatistics:
        return NodeStatistics(self.basis, self.prior_xi, grid)

    @property
    def prepared(self) -> bool:
        return self.Z is not None and self.psi_prior is not None


def log_normalizer(spec: PosteriorSpec, grid: SparseGrid, stats: NodeStatistics | None = None) -> float:
    """``Z = log E_prior[exp(-l(., y))]`` by quadrature under the prior bijection."""
    stats = stats if stats is not None else spec.prior_statistics(grid)
    ell = spec.model(stats.x, spec.y)
    a = stats.C @ spec.prior
    psi = stats.log_sum(a)
    try:
        log_mass = stats.log_sum(a - ell)
    except Exception as exc:
        raise MeasurementInconsistencyError("likelihood has no mass under the prior") from exc
    Z = log_mass - psi
    if not np.isfinite(Z):
        raise MeasurementInconsistencyError(f"log-normalizer is {Z}")
    return float(Z)


def prepare(spec: PosteriorSpec, grid: SparseGrid) -> PosteriorSpec:
    """Return a copy of ``spec`` with Z and psi(prior) cached."""
    stats = spec.prior_statistics(grid)
    psi = log_partition(spec.basis, spec.prior, spec.prior_xi, grid, stats=stats)
    return replace(spec, Z=log_normalizer(spec, grid, stats), psi_prior=psi)


def make_posterior(basis, prior, prior_xi, y, model, grid) -> PosteriorSpec:
    spec = PosteriorSpec(basis, np.asarray(prior, dtype=float), prior_xi, np.atleast_1d(np.asarray(y, dtype=float)), model)
    return prepare(spec, grid)


def log_q_unnormalized(spec: PosteriorSpec, x) -> np.ndarray:
    """``c(x)^T theta_prior - psi(theta_prior) - l(x, y) - Z`` at rows of x."""
    if not spec.prepared:
        raise ValueError("posterior spec has no cached Z; call prepare() first")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return spec.basis.evaluate(x) @ spec.prior - spec.psi_prior - spec.model(x, spec.y) - spec.Z


def posterior_moments(spec: PosteriorSpec, grid: SparseGrid) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of q by quadrature under the prior bijection."""
    stats = spec.prior_statistics(grid)
    w = stats.normalized_weights(stats.C @ spec.prior - spec.model(stats.x, spec.y))
    mean = w @ stats.x
    r = stats.x - mean
    cov = (r * w[:, None]).T @ r
    return mean, 0.5 * (cov + cov.T)
