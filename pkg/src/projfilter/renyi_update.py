"""Renyi-divergence Bayesian update by Riemannian gradient descent.

The objective is ``D_alpha(q || p_theta)`` for the posterior q of a
:class:`~projfilter.posterior.PosteriorSpec`.  Its Euclidean gradient in
natural coordinates is ``eta(theta) - eta_alpha(theta)``; the Riemannian
gradient on the square-root manifold (metric g/4) is ``4 g^-1 (eta - eta_alpha)``.

Quadrature layout: every integral, including those involving q, uses the
nodes of the current bijection of p_theta, which contracts onto q as the
flow proceeds.  The divergence and its gradient are therefore consistent:
the gradient returned here is the exact derivative of the divergence
computed here, for a fixed bijection.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import RK45
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (
    DegenerateDensityError,
    DivergenceOverflowError,
    InvalidPosteriorError,
    MomentDegeneracyError,
    NumericalFailure,
)
from .expfam import (
    BijectionParams,
    NodeStatistics,
    StatisticsBasis,
    moments,
    moments_and_fisher,
    moments_to_bijection,
    quadratic_block,
)
from .posterior import PosteriorSpec
from .quadrature import SparseGrid

logger = logging.getLogger(__name__)

SOLVERS = ("euler", "adaptive_rk")
# divergences below -NEGATIVE_TOL mean the quadrature no longer resolves p_theta
NEGATIVE_TOL = 1e-6
MAX_REFRESH_FAILURES = 3
GRADIENTS = ("riemannian", "euclidean")


class WeightDegeneracyWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class UpdateConfig:
    alpha: float = 0.5
    delta: float = 1.0
    dt: float = 1.25e-2
    n_steps: int = 400
    solver: str = "euler"
    gradient: str = "riemannian"
    grad_tol: float = 1e-8
    metric_stride: int = 1
    rtol: float = 1e-6
    atol: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        for name in ("delta", "dt", "grad_tol", "rtol", "atol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_steps < 0 or self.metric_stride < 1:
            raise ValueError("n_steps must be >= 0 and metric_stride >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.gradient not in GRADIENTS:
            raise ValueError(f"gradient must be one of {GRADIENTS}")


@dataclass
class IterationRecord:
    iteration: int
    time: float
    theta: np.ndarray
    d_half: float
    d_kl: float
    grad_norm: float
    seconds: float
    hellinger: Optional[float] = None
    flagged: bool = False


@dataclass
class UpdateTrace:
    records: list = field(default_factory=list)
    final_xi: Optional[BijectionParams] = None
    converged_at: Optional[int] = None

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "t", "D_half", "D_KL", "grad_norm", "hellinger", "seconds", "flagged"])
            for r in self.records:
                writer.writerow([
                    r.iteration,
                    f"{r.time:.17g}",
                    f"{r.d_half:.17g}",
                    f"{r.d_kl:.17g}",
                    f"{r.grad_norm:.17g}",
                    "" if r.hellinger is None else f"{r.hellinger:.17g}",
                    f"{r.seconds:.6f}",
                    int(r.flagged),
                ])


class _QTerms:
    """Unnormalized log-posterior on one set of nodes, and its log-mass there."""

    def __init__(self, spec: PosteriorSpec, stats: NodeStatistics):
        self.ell = spec.model(stats.x, spec.y)
        self.log_q_un = stats.C @ spec.prior - self.ell
        try:
            # log of psi(theta_prior) + Z as seen by these nodes
            self.log_mass = stats.log_sum(self.log_q_un)
        except DegenerateDensityError as exc:
            raise DivergenceOverflowError("posterior has no mass on the current nodes") from exc


def _q_terms(spec: PosteriorSpec, stats: NodeStatistics) -> _QTerms:
    hit = stats.cache.get(id(spec))
    if hit is None or hit[0] is not spec:
        hit = (spec, _QTerms(spec, stats))
        stats.cache[id(spec)] = hit
    return hit[1]


def _stats(spec, xi, grid, stats):
    return stats if stats is not None else NodeStatistics(spec.basis, xi, grid)


def renyi_divergence(spec: PosteriorSpec, theta, xi: BijectionParams, grid: SparseGrid, alpha: float,
                     stats: NodeStatistics | None = None) -> float:
    """``D_alpha(q || p_theta) = log(integral q^alpha p^(1 - alpha)) / (alpha - 1)``; alpha = 1 gives KL.

    Every integral uses the nodes of bijection ``xi``.
    """
    if alpha == 1.0:
        return kl_divergence(spec, theta, xi, grid, stats=stats)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    stats = _stats(spec, xi, grid, stats)
    qt = _q_terms(spec, stats)
    a = stats.C @ np.asarray(theta, dtype=float)
    psi = stats.log_sum(a)
    try:
        log_int = stats.log_sum(alpha * qt.log_q_un + (1 - alpha) * a)
    except DegenerateDensityError as exc:
        raise DivergenceOverflowError("q and p_theta are numerically disjoint") from exc
    d = (log_int - alpha * qt.log_mass - (1 - alpha) * psi) / (alpha - 1.0)
    if not np.isfinite(d):
        raise DivergenceOverflowError(f"Renyi divergence is {d}")
    return float(d)


def renyi_half(spec, theta, xi, grid, stats=None) -> float:
    """``D_1/2(q || p_theta) = -2 log integral sqrt(q p_theta)``."""
    return renyi_divergence(spec, theta, xi, grid, 0.5, stats=stats)


def kl_divergence(spec, theta, xi, grid, stats=None) -> float:
    """``D_KL(q || p_theta) = E_q[log q - c^T theta] + psi(theta)``."""
    stats = _stats(spec, xi, grid, stats)
    qt = _q_terms(spec, stats)
    a = stats.C @ np.asarray(theta, dtype=float)
    w = stats.normalized_weights(qt.log_q_un)
    d = w @ (qt.log_q_un - a) - qt.log_mass + stats.log_sum(a)
    if not np.isfinite(d):
        raise DivergenceOverflowError(f"KL divergence is {d}")
    return float(d)


def eta_alpha(spec, theta, xi, grid, alpha, stats=None) -> np.ndarray:
    """Tilted moments ``E[c q^alpha p^(1-alpha)] / E[q^alpha p^(1-alpha)]`` under bijection ``xi``.

    For alpha = 1 these are the posterior moments ``E_q[c]``.
    """
    stats = _stats(spec, xi, grid, stats)
    qt = _q_terms(spec, stats)
    log_w = qt.log_q_un if alpha == 1.0 else alpha * qt.log_q_un + (1 - alpha) * (stats.C @ np.asarray(theta, dtype=float))
    w = stats.normalized_weights(log_w)
    if np.max(np.abs(w)) > 0.99:
        warnings.warn("tilted quadrature weights concentrate on a single node", WeightDegeneracyWarning)
    return w @ stats.C


def _solve_fisher(g, rhs, retry_shift=1e-6):
    """Cholesky solve of ``g x = rhs``; returns (x, failed_once)."""
    try:
        return cho_solve(cho_factor(g, lower=True), rhs), False
    except (LinAlgError, ValueError):
        shift = retry_shift * max(1.0, float(np.trace(g)) / g.shape[0])
        logger.warning("Cholesky failed; retrying with shift %.3e", shift)
        return cho_solve(cho_factor(g + shift * np.eye(g.shape[0]), lower=True), rhs), True


def riemannian_gradient(spec, theta, xi, grid, alpha, gradient="riemannian") -> np.ndarray:
    """Coordinates of the gradient: ``4 g^-1 (eta - eta_alpha)`` (or ``4 (eta - eta_alpha)``)."""
    stats = NodeStatistics(spec.basis, xi, grid)
    eta, g = moments_and_fisher(spec.basis, theta, xi, grid, stats=stats)
    diff = eta - eta_alpha(spec, theta, xi, grid, alpha, stats=stats)
    if gradient == "euclidean":
        return 4.0 * diff
    return 4.0 * _solve_fisher(g, diff)[0]


def conjugate_update(theta_prior, theta_ell, basis: StatisticsBasis | None = None) -> np.ndarray:
    """Exact posterior parameters for ``l = c^T theta_ell``: ``theta_prior - theta_ell``.

    With ``basis`` given, the result is screened for integrability: the
    highest-degree non-zero block must have even degree with negative pure
    powers, and a degree-2 leading block must be negative definite.
    """
    theta = np.asarray(theta_prior, dtype=float) - np.asarray(theta_ell, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise InvalidPosteriorError("posterior parameters are not finite")
    if basis is not None:
        _check_integrable(basis, theta)
    return theta


def _check_integrable(basis: StatisticsBasis, theta):
    degrees = basis.indices.sum(axis=1)
    nonzero = degrees[theta != 0]
    top = int(nonzero.max()) if nonzero.size else 0
    if top < 2 or top % 2:
        raise InvalidPosteriorError(f"leading degree {top} of c^T theta is not a positive even number")
    for k in range(basis.dim):
        e = np.zeros(basis.dim, dtype=int)
        e[k] = top
        if theta[basis.position(e)] >= 0:
            raise InvalidPosteriorError(f"coefficient of x{k + 1}^{top} is not negative")
    if top == 2 and np.linalg.eigvalsh(quadratic_block(basis, theta))[-1] >= 0:
        raise InvalidPosteriorError("quadratic form is not negative definite")


class _Stepper:
    """Evaluates the gradient-flow vector field and bookkeeping for one update."""

    def __init__(self, spec, config: UpdateConfig, grid, monitor):
        self.spec = spec
        self.config = config
        self.grid = grid
        self.monitor = monitor
        self.trace = UpdateTrace()
        self.t0 = time.monotonic()
        self.solve_failures = 0
        self.refresh_failures = 0

    def field(self, theta, xi):
        """Return (velocity, eta - eta_alpha, stats) at theta under bijection xi."""
        cfg = self.config
        stats = NodeStatistics(self.spec.basis, xi, self.grid)
        eta, g = moments_and_fisher(self.spec.basis, theta, xi, self.grid, stats=stats)
        diff = eta - eta_alpha(self.spec, theta, xi, self.grid, cfg.alpha, stats=stats)
        if cfg.gradient == "euclidean":
            direction = 4.0 * diff
            self.solve_failures = 0
        else:
            sol, failed = _solve_fisher(g, diff)
            self.solve_failures = self.solve_failures + 1 if failed else 0
            direction = 4.0 * sol
        return -cfg.delta * direction, diff, stats

    def refresh_xi(self, theta, xi, stats=None):
        """New bijection from moments of theta under the old bijection; (xi, flagged)."""
        try:
            eta = moments(self.spec.basis, theta, xi, self.grid, stats=stats)
            new = moments_to_bijection(self.spec.basis, eta)
        except (MomentDegeneracyError, DegenerateDensityError, ValueError) as exc:
            self.refresh_failures += 1
            if self.refresh_failures >= MAX_REFRESH_FAILURES:
                raise MomentDegeneracyError(
                    f"bijection refresh failed {self.refresh_failures} times in a row: {exc}"
                ) from exc
            logger.warning("bijection refresh failed (%s); keeping previous bijection", exc)
            return xi, True
        self.refresh_failures = 0
        return new, False

    def record(self, k, t, theta, xi, diff, stats, flagged=False):
        cfg = self.config
        d_half = renyi_half(self.spec, theta, xi, self.grid, stats=stats)
        d_kl = kl_divergence(self.spec, theta, xi, self.grid, stats=stats)
        grad_norm = float(np.linalg.norm(diff))
        if not (np.isfinite(d_half) and np.isfinite(d_kl) and np.isfinite(grad_norm)):
            raise DivergenceOverflowError("non-finite divergence")
        if min(d_half, d_kl) < -NEGATIVE_TOL:
            raise DivergenceOverflowError(
                f"negative divergence (D_1/2={d_half:.3e}, D_KL={d_kl:.3e}): quadrature no longer resolves p_theta"
            )
        hell = None
        if self.monitor is not None and (k % cfg.metric_stride == 0 or k == cfg.n_steps):
            hell = float(self.monitor(theta))
        self.trace.records.append(IterationRecord(
            k, t, np.array(theta, copy=True), d_half, d_kl, grad_norm,
            time.monotonic() - self.t0, hell, flagged,
        ))
        if self.trace.converged_at is None and grad_norm <= cfg.grad_tol:
            self.trace.converged_at = k

    def fail(self, exc, k, theta, xi):
        self.trace.final_xi = xi
        raise NumericalFailure(
            f"update broke down at iteration {k}: {exc}", theta=theta, xi=xi, trace=self.trace, iteration=k
        ) from exc


_NUMERIC_ERRORS = (
    DegenerateDensityError, DivergenceOverflowError, MomentDegeneracyError, FloatingPointError, LinAlgError, ValueError,
)


def update(spec: PosteriorSpec, config: UpdateConfig, grid: SparseGrid,
           monitor: Optional[Callable[[np.ndarray], float]] = None):
    """Run the gradient-flow Bayesian update starting from the prior.

    Parameters
    ----------
    spec : prepared posterior specification
    config : step sizes, divergence order, solver and gradient type
    grid : transformed sparse grid
    monitor : optional ``theta -> float`` (e.g. Hellinger distance to a
        ground-truth grid), evaluated every ``config.metric_stride`` records

    Returns
    -------
    theta, xi, trace
        Final natural parameters, final bijection and the per-step trace.

    Raises
    ------
    NumericalFailure
        When the iteration produces non-finite values; carries the last good
        state and the partial trace.
    """
    stepper = _Stepper(spec, config, grid, monitor)
    theta = np.array(spec.prior, dtype=float)
    xi = spec.prior_xi
    try:
        vel, diff, stats = stepper.field(theta, xi)
        stepper.record(0, 0.0, theta, xi, diff, stats)
    except _NUMERIC_ERRORS as exc:
        stepper.fail(exc, 0, theta, xi)

    if config.solver == "euler":
        theta, xi = _run_euler(stepper, theta, xi, vel)
    else:
        theta, xi = _run_rk(stepper, theta, xi)
    last = stepper.trace.records[-1]
    if monitor is not None and last.hellinger is None:
        last.hellinger = float(monitor(last.theta))
    stepper.trace.final_xi = xi
    return theta, xi, stepper.trace


def _run_euler(stepper: _Stepper, theta, xi, vel):
    cfg = stepper.config
    t = 0.0
    for k in range(1, cfg.n_steps + 1):
        # two consecutive failed Fisher solves: take half a step
        h = cfg.dt / 2 if stepper.solve_failures >= 2 else cfg.dt
        try:
            with np.errstate(over="raise", invalid="raise"):
                theta_new = theta + h * vel
            if not np.all(np.isfinite(theta_new)):
                raise FloatingPointError("non-finite natural parameters")
            xi_new, flagged = stepper.refresh_xi(theta_new, xi)
            vel_new, diff, stats = stepper.field(theta_new, xi_new)
            if not np.all(np.isfinite(vel_new)):
                raise FloatingPointError("non-finite gradient")
            t += h
            stepper.record(k, t, theta_new, xi_new, diff, stats, flagged)
        except _NUMERIC_ERRORS as exc:
            stepper.fail(exc, k, theta, xi)
        theta, xi, vel = theta_new, xi_new, vel_new
    return theta, xi


def _run_rk(stepper: _Stepper, theta, xi):
    cfg = stepper.config
    state = {"xi": xi}

    def rhs(_t, th):
        vel, _diff, _stats = stepper.field(th, state["xi"])
        if not np.all(np.isfinite(vel)):
            raise FloatingPointError("non-finite gradient")
        return vel

    t_end = cfg.n_steps * cfg.dt
    k = 0
    try:
        solver = RK45(rhs, 0.0, theta, t_end, first_step=min(cfg.dt, t_end) if t_end > 0 else None,
                      rtol=cfg.rtol, atol=cfg.atol)
    except _NUMERIC_ERRORS as exc:
        stepper.fail(exc, 0, theta, xi)
    while t_end > 0 and solver.status == "running":
        k += 1
        try:
            msg = solver.step()
            if solver.status == "failed":
                raise FloatingPointError(f"adaptive solver failed: {msg}")
            theta_new = np.array(solver.y)
            xi_new, flagged = stepper.refresh_xi(theta_new, state["xi"])
            state["xi"] = xi_new
            _vel, diff, stats = stepper.field(theta_new, xi_new)
            stepper.record(k, solver.t, theta_new, xi_new, diff, stats, flagged)
        except _NUMERIC_ERRORS as exc:
            stepper.fail(exc, k, theta, state["xi"])
        theta = theta_new
    return theta, state["xi"]
