"""Reference Bayesian updates: unscented, Gauss-Hermite and particle resampling.

The sigma-point updates need the measurement in the form ``z = g(x) + v``
with ``v ~ N(0, R_z)``; :func:`reduce_measurement` provides that form for
the built-in models.  Random numbers come from ``numpy.random.Philox``, a
counter-based generator, so seeded runs are identical across platforms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .errors import DegenerateParticleError, InvalidPosteriorError, SingularMeasurementError
from .expfam import StatisticsBasis, gaussian_to_natural, natural_to_gaussian
from .posterior import ADDITIVE_GAUSSIAN, LikelihoodModel

UT_ALPHA = 1.0
UT_BETA = 2.0
RNG_ALGORITHM = "numpy.random.Philox"


def default_kappa(dim: int) -> float:
    """``3 - d``, which matches the fourth moment of a Gaussian along each axis."""
    return 3.0 - dim


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if Sigma.shape != (mu.size, mu.size):
            raise ValueError("Sigma must be (d, d) to match mu")
        Sigma = 0.5 * (Sigma + Sigma.T)
        try:
            np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError as exc:
            raise InvalidPosteriorError("covariance is not positive definite") from exc
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", Sigma)

    @property
    def dim(self) -> int:
        return self.mu.size

    def to_natural(self, basis: StatisticsBasis) -> np.ndarray:
        return gaussian_to_natural(basis, self.mu, self.Sigma)

    @classmethod
    def from_natural(cls, basis: StatisticsBasis, theta) -> "GaussianBelief":
        theta = np.asarray(theta, dtype=float)
        if np.any(theta[basis.indices.sum(axis=1) > 2] != 0):
            raise ValueError("natural parameters have non-Gaussian terms")
        return cls(*natural_to_gaussian(basis, theta))


@dataclass(frozen=True, eq=False)
class ParticleSet:
    points: np.ndarray
    weights: np.ndarray
    seed: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("particle weights must be nonnegative and sum to 1")

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def to_binary(self, path) -> None:
        """Rows of (x_1, ..., x_d, weight) as little-endian float64."""
        np.column_stack([self.points, self.weights]).astype("<f8").tofile(path)

    def to_csv(self, path) -> None:
        header = ",".join([f"x{k + 1}" for k in range(self.points.shape[1])] + ["weight"])
        np.savetxt(path, np.column_stack([self.points, self.weights]), delimiter=",", fmt="%.17g",
                   header=header, comments="")

    @classmethod
    def from_binary(cls, path, dim: int, seed: int = 0) -> "ParticleSet":
        rows = np.fromfile(path, dtype="<f8").reshape(-1, dim + 1)
        return cls(rows[:, :dim], rows[:, dim], seed)


@dataclass(frozen=True, eq=False)
class ReducedMeasurement:
    """Measurement ``z = g(x) + v`` with ``v ~ N(0, R)``."""

    g: Callable[[np.ndarray], np.ndarray]
    R: np.ndarray
    z: np.ndarray


def reduce_measurement(model: LikelihoodModel, y) -> ReducedMeasurement:
    """Express a likelihood as an additive-Gaussian measurement.

    Additive-Gaussian models reduce directly.  The componentwise-sine model
    becomes the pseudo-measurement ``0 = sin(x - y) + v`` with
    ``v ~ N(0, sigma_y^2 I)``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if model.kind == ADDITIVE_GAUSSIAN:
        return ReducedMeasurement(model.h, model.R, y)
    if model.name == "example-a":
        sigma = model.params["sigma_y"]
        return ReducedMeasurement(lambda x: np.sin(x - y), sigma**2 * np.eye(y.size), np.zeros(y.size))
    raise ValueError(f"model {model.name!r} has no additive-Gaussian form for sigma-point updates")


def _sigma_point_update(belief: GaussianBelief, meas: ReducedMeasurement, points, wm, wc) -> GaussianBelief:
    Z = np.atleast_2d(meas.g(points))
    z_hat = wm @ Z
    dz = Z - z_hat
    dx = points - belief.mu
    S = (dz * wc[:, None]).T @ dz + meas.R
    Pxz = (dx * wc[:, None]).T @ dz
    try:
        K = np.linalg.solve(S.T, Pxz.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularMeasurementError("innovation covariance is singular") from exc
    mu = belief.mu + K @ (meas.z - z_hat)
    # Joseph form with the statistically linearized measurement matrix
    H = np.linalg.solve(belief.Sigma, Pxz).T
    A = np.eye(belief.dim) - K @ H
    Sigma = A @ belief.Sigma @ A.T + K @ meas.R @ K.T
    return GaussianBelief(mu, Sigma)


def unscented_update(belief: GaussianBelief, meas: ReducedMeasurement, alpha=UT_ALPHA, beta=UT_BETA,
                     kappa=None) -> GaussianBelief:
    """Unscented measurement update with 2d + 1 sigma points (``kappa`` defaults to ``3 - d``)."""
    d = belief.dim
    kappa = default_kappa(d) if kappa is None else kappa
    lam = alpha**2 * (d + kappa) - d
    L = np.linalg.cholesky((d + lam) * belief.Sigma)
    points = np.vstack([belief.mu, belief.mu + L.T, belief.mu - L.T])
    wm = np.full(2 * d + 1, 0.5 / (d + lam))
    wm[0] = lam / (d + lam)
    wc = wm.copy()
    wc[0] += 1.0 - alpha**2 + beta
    return _sigma_point_update(belief, meas, points, wm, wc)


def gauss_hermite_update(belief: GaussianBelief, meas: ReducedMeasurement, order: int = 17) -> GaussianBelief:
    """Gauss-Hermite measurement update on the tensor grid of ``order**d`` points."""
    if order < 1:
        raise ValueError("order must be >= 1")
    nodes, weights = hermegauss(order)
    weights = weights / weights.sum()
    d = belief.dim
    unit = np.array(list(itertools.product(nodes, repeat=d)))
    w = np.prod(np.array(list(itertools.product(weights, repeat=d))), axis=1)
    points = belief.mu + unit @ np.linalg.cholesky(belief.Sigma).T
    return _sigma_point_update(belief, meas, points, w, w)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by systematic resampling with a single uniform offset."""
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def particle_update(belief: GaussianBelief, model: LikelihoodModel, y, n_particles: int, seed: int) -> ParticleSet:
    """Sample the Gaussian prior, weight by the likelihood and resample systematically."""
    n_particles = int(n_particles)
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    rng = make_rng(seed)
    x = rng.multivariate_normal(belief.mu, belief.Sigma, size=n_particles, method="cholesky")
    log_w = -model(x, y)
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    total = logsumexp(log_w)
    if not np.isfinite(total):
        raise DegenerateParticleError("all particle weights underflow")
    idx = systematic_resample(np.exp(log_w - total), rng)
    return ParticleSet(x[idx], np.full(n_particles, 1.0 / n_particles), int(seed))
