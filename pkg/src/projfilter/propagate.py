"""Predictive step: the projected Fokker-Planck flow for polynomial SDEs.

Polynomials are dicts mapping exponent tuples to coefficients.  For an SDE
with drift ``f`` and generator coefficient matrix ``a`` (``a = rho rho^T``),
the backward operator is

    L(phi) = sum_i f_i d(phi)/dx_i + 0.5 sum_ij a_ij d2(phi)/dx_i dx_j

and the natural parameters follow ``d theta / dt = g(theta)^-1 E_theta[L(c)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import RK45

from .errors import DegenerateDensityError, MomentDegeneracyError, NumericalFailure
from .expfam import BijectionParams, NodeStatistics, StatisticsBasis, moments, moments_and_fisher, moments_to_bijection
from .quadrature import SparseGrid

Polynomial = dict  # {exponent tuple: coefficient}
SUBSTEPS_PER_UNIT_TIME = 1000


def poly_add(p: Polynomial, q: Polynomial, scale: float = 1.0) -> Polynomial:
    out = dict(p)
    for e, c in q.items():
        out[e] = out.get(e, 0.0) + scale * c
    return {e: c for e, c in out.items() if c != 0.0}


def poly_mul(p: Polynomial, q: Polynomial) -> Polynomial:
    out: Polynomial = {}
    for e1, c1 in p.items():
        for e2, c2 in q.items():
            e = tuple(a + b for a, b in zip(e1, e2))
            out[e] = out.get(e, 0.0) + c1 * c2
    return {e: c for e, c in out.items() if c != 0.0}


def poly_diff(p: Polynomial, k: int) -> Polynomial:
    """Partial derivative with respect to x_k."""
    out: Polynomial = {}
    for e, c in p.items():
        if e[k] == 0:
            continue
        ne = list(e)
        ne[k] -= 1
        out[tuple(ne)] = out.get(tuple(ne), 0.0) + c * e[k]
    return out


def poly_degree(p: Polynomial) -> int:
    return max((sum(e) for e in p), default=0)


def poly_eval(p: Polynomial, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    out = np.zeros(x.shape[0])
    for e, c in p.items():
        out += c * np.prod(x ** np.asarray(e), axis=1)
    return out


def constant(value: float, dim: int) -> Polynomial:
    return {} if value == 0 else {(0,) * dim: float(value)}


@dataclass(frozen=True)
class PolynomialSDE:
    """Drift ``f`` (d polynomials) and generator coefficients ``a`` (d x d polynomials)."""

    drift: tuple
    diffusion: tuple

    def __post_init__(self):
        d = len(self.drift)
        if len(self.diffusion) != d or any(len(row) != d for row in self.diffusion):
            raise ValueError("diffusion must be a d x d table")
        for i in range(d):
            for j in range(d):
                if self.diffusion[i][j] != self.diffusion[j][i]:
                    raise ValueError("diffusion matrix must be symmetric")
        a_const = self.constant_diffusion()
        if a_const is not None and np.linalg.eigvalsh(a_const)[0] < -1e-12:
            raise ValueError("constant diffusion matrix must be positive semidefinite")

    @property
    def dim(self) -> int:
        return len(self.drift)

    @classmethod
    def build(cls, drift, diffusion) -> "PolynomialSDE":
        """Accept drift as a list of polynomials and diffusion as a matrix of numbers or polynomials."""
        d = len(drift)
        drift = tuple({tuple(map(int, e)): float(c) for e, c in f.items()} for f in drift)
        table = []
        for row in diffusion:
            cells = []
            for entry in row:
                if isinstance(entry, dict):
                    cells.append({tuple(map(int, e)): float(c) for e, c in entry.items()})
                else:
                    cells.append(constant(float(entry), d))
            table.append(tuple(cells))
        return cls(drift, tuple(table))

    def constant_diffusion(self):
        """The diffusion matrix if every entry is constant, else None."""
        zero = (0,) * self.dim
        out = np.zeros((self.dim, self.dim))
        for i, row in enumerate(self.diffusion):
            for j, p in enumerate(row):
                if any(e != zero for e in p):
                    return None
                out[i, j] = p.get(zero, 0.0)
        return out


def apply_generator(sde: PolynomialSDE, basis: StatisticsBasis) -> list[Polynomial]:
    """Exact images ``L(c_j)`` of every natural statistic."""
    if sde.dim != basis.dim:
        raise ValueError("SDE and basis dimensions differ")
    drift_deg = max((poly_degree(f) for f in sde.drift), default=0)
    images = []
    for idx in basis.indices:
        c = {tuple(int(v) for v in idx): 1.0}
        out: Polynomial = {}
        for i in range(sde.dim):
            out = poly_add(out, poly_mul(sde.drift[i], poly_diff(c, i)))
            for j in range(sde.dim):
                out = poly_add(out, poly_mul(sde.diffusion[i][j], poly_diff(poly_diff(c, i), j)), 0.5)
        diff_deg = max((poly_degree(p) for row in sde.diffusion for p in row), default=0)
        bound = max(sum(idx) - 1 + drift_deg, sum(idx) - 2 + diff_deg)
        assert poly_degree(out) <= max(bound, 0)
        images.append(out)
    return images


def predictive_rhs(theta, xi: BijectionParams, grid: SparseGrid, gen_image: list[Polynomial],
                   basis: StatisticsBasis) -> np.ndarray:
    """``g(theta)^-1 E_theta[L(c)]`` with expectations under bijection ``xi``."""
    stats = NodeStatistics(basis, xi, grid)
    _eta, g = moments_and_fisher(basis, theta, xi, grid, stats=stats)
    w = stats.normalized_weights(stats.C @ np.asarray(theta, dtype=float))
    values = np.column_stack([poly_eval(p, stats.x) for p in gen_image])
    rhs = w @ values
    return np.linalg.solve(np.linalg.cholesky(g).T, np.linalg.solve(np.linalg.cholesky(g), rhs))


def propagate_path(theta, xi, sde, basis, grid, delta_t, n_substeps=None, solver="euler"):
    """Integrate the projected flow and return ``(times, thetas, xis)``.

    ``n_substeps`` defaults to ``SUBSTEPS_PER_UNIT_TIME`` per unit time (Euler
    only; the adaptive solver picks its own steps).
    """
    if delta_t < 0:
        raise ValueError("delta_t must be nonnegative")
    if solver not in ("euler", "adaptive_rk"):
        raise ValueError(f"unknown solver {solver!r}")
    theta = np.array(theta, dtype=float)
    times, thetas, xis = [0.0], [theta.copy()], [xi]
    if delta_t == 0:
        return times, thetas, xis
    image = apply_generator(sde, basis)

    def refresh(th, old):
        return moments_to_bijection(basis, moments(basis, th, old, grid))

    try:
        if solver == "euler":
            n = n_substeps or max(1, math.ceil(SUBSTEPS_PER_UNIT_TIME * delta_t))
            h = delta_t / n
            for k in range(1, n + 1):
                theta = theta + h * predictive_rhs(theta, xi, grid, image, basis)
                if not np.all(np.isfinite(theta)):
                    raise FloatingPointError("non-finite natural parameters")
                xi = refresh(theta, xi)
                times.append(k * h)
                thetas.append(theta.copy())
                xis.append(xi)
        else:
            state = {"xi": xi}
            rk = RK45(lambda _t, th: predictive_rhs(th, state["xi"], grid, image, basis), 0.0, theta, delta_t,
                      rtol=1e-8, atol=1e-10)
            while rk.status == "running":
                rk.step()
                if rk.status == "failed":
                    raise FloatingPointError("adaptive solver failed")
                theta = np.array(rk.y)
                state["xi"] = xi = refresh(theta, xi)
                times.append(rk.t)
                thetas.append(theta.copy())
                xis.append(xi)
    except (ArithmeticError, np.linalg.LinAlgError, DegenerateDensityError, MomentDegeneracyError) as exc:
        raise NumericalFailure(f"propagation broke down at t={times[-1]:.6g}: {exc}", theta=thetas[-1],
                               xi=xis[-1], trace=None, iteration=len(times) - 1) from exc
    return times, thetas, xis


def propagate(theta, xi, sde: PolynomialSDE, basis: StatisticsBasis, grid: SparseGrid, delta_t: float,
              n_substeps: int | None = None, solver: str = "euler"):
    """Evolve ``theta`` over ``delta_t``; returns the final (theta, xi)."""
    _times, thetas, xis = propagate_path(theta, xi, sde, basis, grid, delta_t, n_substeps, solver)
    return thetas[-1], xis[-1]
