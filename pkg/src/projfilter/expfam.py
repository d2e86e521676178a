"""Exponential families with monomial natural statistics.

A density in the family is ``p(x) = exp(c(x)^T theta - psi(theta))`` where
``c`` collects the monomials ``x^i`` with ``1 <= |i| <= max_order``.  The
log-partition ``psi`` and all expectations are evaluated with a sparse grid
relocated by the affine bijection ``x = mu + sqrt(2) L y``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from math import comb

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .errors import DegenerateDensityError, MomentDegeneracyError
from .quadrature import SparseGrid

logger = logging.getLogger(__name__)

FISHER_EPS = 1e-9


class OpCounter:
    """Deterministic work counter: node evaluations times statistics dimension."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)

    def reset(self):
        self.count = 0


op_counter = OpCounter()


@dataclass(frozen=True, eq=False)
class StatisticsBasis:
    dim: int
    max_order: int
    indices: np.ndarray  # (m, d) exponents, graded-lex order

    @property
    def m(self) -> int:
        return self.indices.shape[0]

    @cached_property
    def first_order(self) -> np.ndarray:
        """Positions of x_1..x_d in c."""
        pos = np.empty(self.dim, dtype=int)
        for k in range(self.dim):
            e = np.zeros(self.dim, dtype=int)
            e[k] = 1
            pos[k] = self.position(e)
        return pos

    @cached_property
    def second_order(self) -> np.ndarray:
        """(d, d) table of positions of x_i x_j in c (symmetric)."""
        pos = np.empty((self.dim, self.dim), dtype=int)
        for i in range(self.dim):
            for j in range(self.dim):
                e = np.zeros(self.dim, dtype=int)
                e[i] += 1
                e[j] += 1
                pos[i, j] = self.position(e)
        return pos

    def position(self, exponent) -> int:
        exponent = np.asarray(exponent)
        hits = np.flatnonzero(np.all(self.indices == exponent, axis=1))
        if hits.size == 0:
            raise KeyError(f"monomial {tuple(exponent)} not in basis")
        return int(hits[0])

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Statistics matrix of shape (N, m) for points x of shape (N, d)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        # powers[k][:, p] = x[:, k] ** p, built by repeated multiplication
        powers = np.ones((self.dim, n, self.max_order + 1))
        for p in range(1, self.max_order + 1):
            powers[:, :, p] = powers[:, :, p - 1] * x.T
        out = np.ones((n, self.m))
        for k in range(self.dim):
            out *= powers[k][:, self.indices[:, k]]
        return out

    def labels(self) -> list[str]:
        names = []
        for idx in self.indices:
            parts = []
            for k, p in enumerate(idx):
                if p == 1:
                    parts.append(f"x{k + 1}")
                elif p > 1:
                    parts.append(f"x{k + 1}^{p}")
            names.append("*".join(parts))
        return names


def build_basis(dim: int, max_order: int) -> StatisticsBasis:
    """All monomials of total degree 1..max_order, ordered by degree then lexicographically (descending exponents of x1 first)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if max_order < 2:
        raise ValueError("max_order must be >= 2")
    rows = []
    for degree in range(1, max_order + 1):
        block = [idx for idx in _exponents(degree, dim)]
        rows.extend(sorted(block, reverse=True))
    indices = np.array(rows, dtype=int)
    indices.setflags(write=False)
    basis = StatisticsBasis(dim, max_order, indices)
    assert basis.m == comb(max_order + dim, dim) - 1
    return basis


def _exponents(degree, dim):
    if dim == 1:
        yield (degree,)
        return
    for first in range(degree + 1):
        for rest in _exponents(degree - first, dim - 1):
            yield (first,) + rest


@dataclass(frozen=True, eq=False)
class BijectionParams:
    """Affine map ``x = mu + sqrt(2) L y`` relocating quadrature nodes."""

    mu: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if L.shape != (mu.size, mu.size):
            raise ValueError("L must be (d, d) to match mu")
        if np.any(np.triu(L, 1) != 0) or np.any(np.diag(L) <= 0):
            raise ValueError("L must be lower-triangular with a positive diagonal")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "L", L)

    @classmethod
    def from_gaussian(cls, mu, Sigma) -> "BijectionParams":
        return cls(np.asarray(mu, dtype=float), np.linalg.cholesky(np.atleast_2d(Sigma)))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def Sigma(self) -> np.ndarray:
        return self.L @ self.L.T

    @property
    def log_jacobian(self) -> float:
        """log of ``2^(d/2) det L``."""
        return 0.5 * self.dim * np.log(2.0) + float(np.sum(np.log(np.diag(self.L))))

    def apply(self, y: np.ndarray) -> np.ndarray:
        return self.mu + np.sqrt(2.0) * np.asarray(y) @ self.L.T


class NodeStatistics:
    """Quadrature nodes mapped by one bijection, with their statistics matrix.

    Rebuilt (never mutated) whenever the bijection changes.  ``log_w`` and
    ``sign`` split the possibly negative Smolyak weights so that sums can be
    taken in the log domain.
    """

    def __init__(self, basis: StatisticsBasis, xi: BijectionParams, grid: SparseGrid):
        if not grid.transformed:
            raise ValueError("grid must be transformed to R^d first")
        if grid.dim != basis.dim or xi.dim != basis.dim:
            raise ValueError("dimension mismatch between basis, bijection and grid")
        self.basis = basis
        self.xi = xi
        self.grid = grid
        self.x = xi.apply(grid.nodes)
        self.C = basis.evaluate(self.x)
        with np.errstate(divide="ignore"):
            self.log_w = np.log(np.abs(grid.weights)) + xi.log_jacobian
        self.sign = np.sign(grid.weights)
        # per-node quantities that other modules derive from these nodes
        self.cache: dict = {}
        op_counter.add(self.C.size)

    def log_sum(self, exponents: np.ndarray) -> float:
        """log of ``sum_i w_i exp(exponents_i)`` including the bijection Jacobian."""
        exponents = np.asarray(exponents, dtype=float)
        if not np.all(np.isfinite(exponents) | (exponents == -np.inf)):
            raise DegenerateDensityError("non-finite exponent in quadrature sum")
        a = exponents + self.log_w
        if np.all(a == -np.inf):
            raise DegenerateDensityError("all quadrature exponents are -inf")
        val, sgn = logsumexp(a, b=self.sign, return_sign=True)
        if sgn <= 0 or not np.isfinite(val):
            raise DegenerateDensityError(f"quadrature sum is not positive (log={val}, sign={sgn})")
        return float(val)

    def normalized_weights(self, exponents: np.ndarray) -> np.ndarray:
        """Signed weights ``w_i exp(e_i) / sum_j w_j exp(e_j)``."""
        log_total = self.log_sum(exponents)
        return self.sign * np.exp(exponents + self.log_w - log_total)

    def expect(self, exponents: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Self-normalized weighted mean of ``values`` rows."""
        w = self.normalized_weights(exponents)
        op_counter.add(np.size(values))
        return w @ values


def gaussian_to_natural(basis: StatisticsBasis, mu, Sigma) -> np.ndarray:
    """Natural parameters of N(mu, Sigma) embedded in the family."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    cf = cho_factor(Sigma, lower=True)  # raises LinAlgError if not SPD
    P = cho_solve(cf, np.eye(basis.dim))
    P = 0.5 * (P + P.T)
    theta = np.zeros(basis.m)
    theta[basis.first_order] = P @ mu
    for i in range(basis.dim):
        theta[basis.second_order[i, i]] = -0.5 * P[i, i]
        for j in range(i + 1, basis.dim):
            theta[basis.second_order[i, j]] = -P[i, j]
    return theta


def natural_to_gaussian(basis: StatisticsBasis, theta) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`gaussian_to_natural` (higher-order entries must be zero)."""
    theta = np.asarray(theta, dtype=float)
    P = np.empty((basis.dim, basis.dim))
    for i in range(basis.dim):
        for j in range(basis.dim):
            k = basis.second_order[i, j]
            P[i, j] = -2.0 * theta[k] if i == j else -theta[k]
    Sigma = np.linalg.inv(P)
    return Sigma @ theta[basis.first_order], 0.5 * (Sigma + Sigma.T)


def quadratic_block(basis: StatisticsBasis, theta) -> np.ndarray:
    """Symmetric matrix Q with ``x^T Q x`` equal to the second-order part of c^T theta."""
    theta = np.asarray(theta, dtype=float)
    Q = np.empty((basis.dim, basis.dim))
    for i in range(basis.dim):
        for j in range(basis.dim):
            k = basis.second_order[i, j]
            Q[i, j] = theta[k] if i == j else 0.5 * theta[k]
    return Q


def log_partition(basis, theta, xi, grid, stats: NodeStatistics | None = None) -> float:
    """Quadrature approximation of psi(theta) under bijection ``xi``."""
    stats = stats if stats is not None else NodeStatistics(basis, xi, grid)
    return stats.log_sum(stats.C @ np.asarray(theta, dtype=float))


def regularize_fisher(g: np.ndarray, eps: float = FISHER_EPS) -> np.ndarray:
    """Symmetrize and, when needed, shift the spectrum above ``eps``."""
    g = 0.5 * (g + g.T)
    lam_min = float(np.linalg.eigvalsh(g)[0])
    if lam_min <= eps:
        shift = max(0.0, eps - lam_min) + eps
        logger.info("Fisher matrix regularized: lambda_min=%.3e, shift=%.3e", lam_min, shift)
        g = g + shift * np.eye(g.shape[0])
    return g


def moments_and_fisher(basis, theta, xi, grid, stats: NodeStatistics | None = None):
    """Moments ``eta = E[c]`` and Fisher matrix ``g = Cov[c]`` under p_theta.

    Both are the exact first and second derivatives of the quadrature
    log-partition, since that is a finite log-sum-exp.
    """
    stats = stats if stats is not None else NodeStatistics(basis, xi, grid)
    w = stats.normalized_weights(stats.C @ np.asarray(theta, dtype=float))
    eta = w @ stats.C
    centred = stats.C - eta
    g = (centred * w[:, None]).T @ centred
    op_counter.add(2 * stats.C.size)
    return eta, regularize_fisher(g)


def moments(basis, theta, xi, grid, stats: NodeStatistics | None = None) -> np.ndarray:
    stats = stats if stats is not None else NodeStatistics(basis, xi, grid)
    return stats.expect(stats.C @ np.asarray(theta, dtype=float), stats.C)


def moments_to_bijection(basis: StatisticsBasis, eta) -> BijectionParams:
    """Mean/covariance bijection read off first and second moments."""
    eta = np.asarray(eta, dtype=float)
    mu = eta[basis.first_order]
    Sigma = eta[basis.second_order] - np.outer(mu, mu)
    Sigma = 0.5 * (Sigma + Sigma.T)
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise MomentDegeneracyError(f"covariance from moments is not SPD: {Sigma.tolist()}") from exc
    if not np.all(np.isfinite(L)) or np.any(np.diag(L) <= 0):
        raise MomentDegeneracyError("covariance from moments is singular")
    return BijectionParams(mu, L)
