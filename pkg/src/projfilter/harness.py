"""Experiment runner: wires configuration, update, baselines and metrics together.

Every run writes CSV/JSON artefacts; see :func:`run_update_experiment`,
:func:`run_table` and :func:`run_propagate`.
"""

from __future__ import annotations

import csv
import importlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import baselines as bl
from . import metrics
from .config import ExperimentConfig, PropagateConfig, TableConfig, TableRow, resolve
from .errors import ConfigError, ProjFilterError
from .expfam import (
    FISHER_EPS,
    BijectionParams,
    build_basis,
    gaussian_to_natural,
    moments,
    moments_to_bijection,
    op_counter,
)
from .posterior import (
    PosteriorSpec,
    custom_model,
    example_a_model,
    example_b_model,
    gaussian_likelihood_natural,
    linear_gaussian_model,
    make_posterior,
    range_bearing_h,
)
from .propagate import PolynomialSDE, propagate_path
from .quadrature import SparseGrid, smolyak_grid, transform_to_unbounded, unbounded_grid
from .renyi_update import UpdateConfig, update

logger = logging.getLogger(__name__)

COMPARISON_HEADER = ["method", "iterations", "hellinger", "op_count", "seconds", "status"]


@dataclass
class Problem:
    config: ExperimentConfig
    grid: SparseGrid
    spec: PosteriorSpec
    prior: bl.GaussianBelief


def _load_callable(path: str):
    module, _, name = path.partition(":")
    if not name:
        raise ConfigError(f"custom_likelihood must look like 'module:function', got {path!r}")
    try:
        return getattr(importlib.import_module(module), name)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot import {path!r}: {exc}") from exc


def build_model(cfg: ExperimentConfig):
    if cfg.example == "example-a":
        return example_a_model(cfg.example_a.sigma_y)
    if cfg.example == "example-b":
        p = cfg.example_b
        return example_b_model(p.z0, p.R, p.r_as_std)
    if cfg.example == "linear-gaussian":
        return linear_gaussian_model(cfg.linear_gaussian.H, cfg.linear_gaussian.R)
    return custom_model(_load_callable(cfg.custom_likelihood), name=cfg.custom_likelihood)


def build_problem(cfg: ExperimentConfig, n_o: Optional[int] = None) -> Problem:
    """Resolve defaults and construct the grid and prepared posterior."""
    cfg = resolve(cfg)
    mean = np.asarray(cfg.prior_mean, dtype=float)
    cov = np.asarray(cfg.prior_cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise ConfigError("prior_cov does not match prior_mean")
    try:
        prior = bl.GaussianBelief(mean, cov)
    except ProjFilterError as exc:
        raise ConfigError(f"prior covariance: {exc}") from exc
    model = build_model(cfg)
    if cfg.y is not None:
        y = np.asarray(cfg.y, dtype=float)
    else:
        y = range_bearing_h(mean[None, :], cfg.example_b.z0)[0]
    basis = build_basis(mean.size, n_o if n_o is not None else cfg.n_o)
    grid = unbounded_grid(mean.size, cfg.quad_level)
    theta0 = gaussian_to_natural(basis, mean, cov)
    spec = make_posterior(basis, theta0, BijectionParams.from_gaussian(mean, cov), y, model, grid)
    return Problem(cfg, grid, spec, prior)


def ground_truth(problem: Problem) -> metrics.DensityGrid:
    cfg = problem.config
    region = metrics.Region(cfg.region.lo, cfg.region.hi) if cfg.region is not None else None
    return metrics.ground_truth_auto(problem.spec, problem.grid, cfg.resolution, cfg.half_width_sd, region=region)


def design_decisions(cfg: ExperimentConfig, truth: metrics.DensityGrid) -> dict:
    """Every default that shapes the numbers, recorded in summary.json."""
    d = truth.region.dim
    return {
        "weight_constant": "(sqrt(pi)/2)^d",
        "smolyak_level": "zero-based total level; (d=2, level=6) has 769 nodes",
        "delta": cfg.delta,
        "fisher_regularization_eps": FISHER_EPS,
        "q_expectations": "nodes of the current bijection",
        "region": {"lo": truth.region.lo.tolist(), "hi": truth.region.hi.tolist()},
        "region_rule": (
            "config override" if cfg.region is not None else
            f"posterior mean +/- {cfg.half_width_sd} posterior sd, doubled until boundary-ring mass <= "
            f"{metrics.BOUNDARY_MASS_TOL}"
        ),
        "resolution": truth.resolution,
        "density_grid": "cell centres (midpoint rule)",
        "histogram_binning_bias": "about 1e-2 in H at 500 x 500 cells",
        "unscented": {"alpha": bl.UT_ALPHA, "beta": bl.UT_BETA, "kappa": bl.default_kappa(d)},
        "sigma_point_covariance": "Joseph form with statistically linearized H",
        "example_a_sigma_points": "pseudo-measurement 0 = sin(x - y) + v, v ~ N(0, sigma_y^2 I)",
        "example_b_r_as_std": cfg.example_b.r_as_std,
        "rng": bl.RNG_ALGORITHM,
        "op_count": "quadrature node evaluations x statistics dimension",
    }


def _theta_row(theta, basis, region, resolution, truth):
    return metrics.hellinger(truth, metrics.density_to_grid(theta, basis, region, resolution))


def run_baseline(problem: Problem, truth, method: str, order=17, n_particles=48000, seed=0,
                 ut_alpha=bl.UT_ALPHA, ut_beta=bl.UT_BETA, ut_kappa=None) -> dict:
    """One comparison row for a reference method; failures are recorded, not raised."""
    spec = problem.spec
    d = problem.prior.dim
    t0 = time.monotonic()
    try:
        if method == "particle":
            ps = bl.particle_update(problem.prior, spec.model, spec.y, n_particles, seed)
            approx = metrics.histogram_to_grid(ps.points, truth.region, truth.resolution)
            label, ops = f"Particle {n_particles:.1e}", n_particles * (d + 1)
        else:
            meas = bl.reduce_measurement(spec.model, spec.y)
            if method == "unscented":
                post = bl.unscented_update(problem.prior, meas, ut_alpha, ut_beta, ut_kappa)
                label, n_pts = "Unscented", 2 * d + 1
            else:
                post = bl.gauss_hermite_update(problem.prior, meas, order)
                label, n_pts = f"GH-{order}", order**d
            approx = metrics.gaussian_grid(post.mu, post.Sigma, truth.region, truth.resolution)
            ops = n_pts * (d + np.size(meas.z))
        h = metrics.hellinger(truth, approx)
        status = "ok"
    except (ProjFilterError, ValueError, np.linalg.LinAlgError) as exc:
        label = {"unscented": "Unscented", "gauss-hermite": f"GH-{order}"}.get(method, f"Particle {n_particles:.1e}")
        h, ops, status = float("nan"), 0, f"failed: {type(exc).__name__}: {exc}"
    return {"method": label, "iterations": 1, "hellinger": h, "op_count": int(ops),
            "seconds": time.monotonic() - t0, "status": status}


def write_comparison(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARISON_HEADER)
        for r in rows:
            writer.writerow([
                r["method"], r["iterations"], f"{r['hellinger']:.17g}", r["op_count"],
                f"{r['seconds']:.6f}", r["status"],
            ])


def _update_config(cfg: ExperimentConfig, **over) -> UpdateConfig:
    base = dict(alpha=cfg.alpha, delta=cfg.delta, dt=cfg.dt, n_steps=cfg.n_steps, solver=cfg.solver,
                gradient=cfg.gradient, metric_stride=cfg.metric_stride)
    base.update(over)
    return UpdateConfig(**base)


def run_update_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run the configured update, its metrics and baselines; write the artefacts.

    Raises
    ------
    NumericalFailure
        When the update breaks down; the partial trace is written first.
    """
    problem = build_problem(cfg)
    cfg = problem.config
    spec, grid = problem.spec, problem.grid
    out = Path(out_dir or cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    truth = ground_truth(problem)

    def monitor(theta):
        return _theta_row(theta, spec.basis, truth.region, truth.resolution, truth)

    op_counter.reset()
    t0 = time.monotonic()
    try:
        theta, xi, trace = update(spec, _update_config(cfg), grid, monitor=monitor)
    except ProjFilterError as exc:
        partial = getattr(exc, "trace", None)
        if partial is not None:
            partial.to_csv(out / "trace.csv")
        raise
    seconds = time.monotonic() - t0
    ops = op_counter.count
    approx = metrics.density_to_grid(theta, spec.basis, truth.region, truth.resolution)
    last = trace.records[-1]
    label = f"{'R-0.5' if cfg.alpha == 0.5 else 'KL'} order {spec.basis.max_order} - {cfg.solver}"
    rows = [{"method": label, "iterations": last.iteration, "hellinger": last.hellinger, "op_count": ops,
             "seconds": seconds, "status": "ok"}]
    for b in cfg.baselines:
        rows.append(run_baseline(problem, truth, b.method, b.order, b.n_particles,
                                 cfg.seed if b.seed is None else b.seed, b.ut_alpha, b.ut_beta, b.ut_kappa))

    summary = {
        "example": cfg.example,
        "final_hellinger": last.hellinger,
        "final_kl": metrics.kl(truth, approx),
        "final_d_half": last.d_half,
        "final_d_kl": last.d_kl,
        "quadrature_hellinger": float(np.sqrt(max(0.0, 1.0 - np.exp(-0.5 * last.d_half)))),
        "iterations": last.iteration,
        "converged_at": trace.converged_at,
        "flagged_steps": int(sum(r.flagged for r in trace.records)),
        "theta": theta.tolist(),
        "statistics": spec.basis.labels(),
        "bijection": {"mu": xi.mu.tolist(), "L": xi.L.tolist()},
        "op_count": ops,
        "baselines": rows[1:],
        "config": json.loads(cfg.model_dump_json()),
        "design_decisions": design_decisions(cfg, truth),
        "timing": {"wall_seconds": seconds},
    }
    if cfg.example == "linear-gaussian":
        lg = cfg.linear_gaussian
        exact = spec.prior - gaussian_likelihood_natural(spec.basis, lg.H, lg.R, spec.y)
        summary["conjugate_theta"] = exact.tolist()
        summary["conjugate_error_inf"] = float(np.max(np.abs(theta - exact)))
    trace.to_csv(out / "trace.csv")
    approx.to_csv(out / "density_approx.csv")
    truth.to_csv(out / "density_truth.csv")
    write_comparison(rows, out / "comparison.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default))
    return summary


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def default_table_rows(example: str) -> list[TableRow]:
    """Rows in the order of the published comparison tables."""
    rows = [
        TableRow(method="unscented", label="Unscented"),
        TableRow(method="gauss-hermite", label="GH-17", order=17),
        TableRow(method="renyi", label="R-0.5 order 2 - euler", n_o=2, alpha=0.5, iterations=50),
        TableRow(method="renyi", label="R-0.5 order 4 - euler", n_o=4, alpha=0.5, iterations=100),
        TableRow(method="renyi", label="KL order 2 - euler", n_o=2, alpha=1.0, iterations=50),
        TableRow(method="renyi", label="KL order 4 - euler", n_o=4, alpha=1.0, iterations=100),
    ]
    for n in (48000, 480000, 4800000):
        rows.append(TableRow(method="particle", label=f"Particle {n:.1e}", n_particles=n))
    return rows


def _renyi_row(cfg: ExperimentConfig, truth, row: TableRow) -> dict:
    t0 = time.monotonic()
    label = row.label or f"{'R-0.5' if row.alpha == 0.5 else 'KL'} order {row.n_o} - {row.solver}"
    try:
        problem = build_problem(cfg, n_o=row.n_o)
        op_counter.reset()
        theta, _xi, trace = update(problem.spec, _update_config(problem.config, alpha=row.alpha, solver=row.solver,
                                                                n_steps=row.iterations), problem.grid)
        h = _theta_row(theta, problem.spec.basis, truth.region, truth.resolution, truth)
        return {"method": label, "iterations": trace.records[-1].iteration, "hellinger": h,
                "op_count": op_counter.count, "seconds": time.monotonic() - t0, "status": "ok"}
    except ProjFilterError as exc:
        return {"method": label, "iterations": row.iterations, "hellinger": float("nan"), "op_count": op_counter.count,
                "seconds": time.monotonic() - t0, "status": f"failed: {type(exc).__name__}: {exc}"}


def run_table(table: TableConfig, out_dir=None) -> list[dict]:
    """Comparison table; an explicit empty row list yields a header-only CSV."""
    cfg = resolve(table.experiment)
    rows_cfg = default_table_rows(cfg.example) if table.rows is None else table.rows
    rows = []
    if rows_cfg:
        problem = build_problem(cfg)
        truth = ground_truth(problem)
        for row in rows_cfg:
            if row.method == "renyi":
                r = _renyi_row(cfg, truth, row)
            else:
                method = row.method
                r = run_baseline(problem, truth, method, row.order, row.n_particles,
                                 cfg.seed if row.seed is None else row.seed)
                if row.label:
                    r["method"] = row.label
            rows.append(r)
    if out_dir is not None or cfg.output_dir:
        out = Path(out_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_comparison(rows, out / "comparison.csv")
    return rows


def run_propagate(pcfg: PropagateConfig, out_dir=None) -> dict:
    """Integrate the projected flow for the configured SDE and write ``trace.csv``."""
    mean = np.asarray(pcfg.initial_mean, dtype=float)
    cov = np.atleast_2d(np.asarray(pcfg.initial_cov, dtype=float))
    d = mean.size
    if len(pcfg.sde.drift) != d or cov.shape != (d, d):
        raise ConfigError("SDE, initial mean and covariance dimensions differ")
    drift = []
    for terms in pcfg.sde.drift:
        poly = {}
        for t in terms:
            if len(t.exponent) != d:
                raise ConfigError(f"exponent {t.exponent} has the wrong length")
            poly[tuple(t.exponent)] = poly.get(tuple(t.exponent), 0.0) + t.coef
        drift.append(poly)
    try:
        sde = PolynomialSDE.build(drift, pcfg.sde.diffusion)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    basis = build_basis(d, pcfg.n_o)
    grid = unbounded_grid(d, pcfg.quad_level)
    theta0 = gaussian_to_natural(basis, mean, cov)
    times, thetas, xis = propagate_path(theta0, BijectionParams.from_gaussian(mean, cov), sde, basis, grid,
                                        pcfg.delta_t, pcfg.n_substeps, pcfg.solver)
    out = Path(out_dir or pcfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    labels = basis.labels()
    with open(out / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"theta[{s}]" for s in labels] + [f"mu{i + 1}" for i in range(d)]
                        + [f"Sigma{i + 1}{j + 1}" for i in range(d) for j in range(d)])
        for t, th, xi in zip(times, thetas, xis):
            fit = moments_to_bijection(basis, moments(basis, th, xi, grid))
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in th] + [f"{v:.17g}" for v in fit.mu]
                            + [f"{v:.17g}" for v in fit.Sigma.ravel()])
    return {"t": times[-1], "theta": thetas[-1].tolist(), "mu": fit.mu.tolist(), "Sigma": fit.Sigma.tolist()}


def dump_grid(dim: int, level: int, path, transformed: bool = True) -> SparseGrid:
    grid = smolyak_grid(dim, level)
    if transformed:
        grid = transform_to_unbounded(grid)
    grid.to_csv(path)
    return grid
