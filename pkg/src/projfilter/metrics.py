"""Dense-grid densities and the Hellinger / KL distances between them.

All grids live on cell centres of a regular partition of a box, so a smooth
density evaluated on the grid and a particle histogram binned on the same
box are directly comparable cell by cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError, RegionTooSmallError
from .expfam import StatisticsBasis
from .posterior import posterior_moments

BOUNDARY_MASS_TOL = 1e-5
# half-width of the default comparison box, in posterior standard deviations
DEFAULT_HALF_WIDTH_SD = 13.0
KL_CAP = 1e3


@dataclass(frozen=True)
class Region:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("region needs lo < hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.size

    @classmethod
    def around(cls, mu, Sigma, half_width_sd=6.0) -> "Region":
        """Box centred at mu with half-width ``half_width_sd`` marginal standard deviations."""
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        sd = np.sqrt(np.diag(np.atleast_2d(Sigma)))
        return cls(mu - half_width_sd * sd, mu + half_width_sd * sd)

    def expanded(self, factor=2.0) -> "Region":
        c = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo) * factor
        return Region(c - half, c + half)


@dataclass(frozen=True, eq=False)
class DensityGrid:
    region: Region
    resolution: int
    values: np.ndarray  # shape (resolution,) * d, indexed [i1, i2, ...]
    overflow: int = 0

    @property
    def cell_measure(self) -> float:
        return float(np.prod((self.region.hi - self.region.lo) / self.resolution))

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell_measure)

    def to_csv(self, path) -> None:
        """Row-major matrix; the header line records region and resolution."""
        r = self.region
        header = (
            f"lo={','.join(f'{v:.17g}' for v in r.lo)};hi={','.join(f'{v:.17g}' for v in r.hi)};"
            f"resolution={self.resolution};overflow={self.overflow}"
        )
        vals = self.values.reshape(self.resolution, -1)
        np.savetxt(path, vals, delimiter=",", fmt="%.17g", header=header)


def cell_centres(region: Region, resolution: int) -> list[np.ndarray]:
    return [
        lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution
        for lo, hi in zip(region.lo, region.hi)
    ]


def grid_points(region: Region, resolution: int) -> np.ndarray:
    """(resolution**d, d) array of cell centres in C order."""
    axes = cell_centres(region, resolution)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _from_log_values(log_vals: np.ndarray, region: Region, resolution: int) -> DensityGrid:
    log_vals = np.where(np.isfinite(log_vals), log_vals, -np.inf)
    vals = np.exp(log_vals - np.max(log_vals))
    cell = float(np.prod((region.hi - region.lo) / resolution))
    vals = vals / (vals.sum() * cell)
    return DensityGrid(region, resolution, vals.reshape((resolution,) * region.dim))


def boundary_mass(grid: DensityGrid) -> float:
    """Fraction of the mass in the outermost ring of cells."""
    inner = grid.values[(slice(1, -1),) * grid.values.ndim]
    total = grid.values.sum()
    return float((total - inner.sum()) / total)


def ground_truth_grid(spec, region: Region, resolution: int = 500, check=True) -> DensityGrid:
    """Exact posterior q on the grid: exp(c^T theta_prior - l(x, y)), normalized.

    Raises
    ------
    RegionTooSmallError
        If more than ``BOUNDARY_MASS_TOL`` of the mass sits on the boundary ring.
    """
    x = grid_points(region, resolution)
    log_vals = spec.basis.evaluate(x) @ spec.prior - spec.model(x, spec.y)
    grid = _from_log_values(log_vals, region, resolution)
    if check and boundary_mass(grid) > BOUNDARY_MASS_TOL:
        raise RegionTooSmallError(f"boundary mass {boundary_mass(grid):.3e} exceeds {BOUNDARY_MASS_TOL}")
    return grid


def default_region(spec, grid, half_width_sd=DEFAULT_HALF_WIDTH_SD) -> Region:
    """Box around the posterior mean, ``half_width_sd`` posterior standard deviations wide each way."""
    mean, cov = posterior_moments(spec, grid)
    return Region.around(mean, cov, half_width_sd)


def ground_truth_auto(spec, grid, resolution=500, half_width_sd=DEFAULT_HALF_WIDTH_SD, max_doublings=3,
                      region: Region | None = None):
    """Ground truth on ``region`` (default :func:`default_region`), doubled until the boundary check passes."""
    region = region if region is not None else default_region(spec, grid, half_width_sd)
    for attempt in range(max_doublings + 1):
        try:
            return ground_truth_grid(spec, region, resolution)
        except RegionTooSmallError:
            if attempt == max_doublings:
                raise
            region = region.expanded(2.0)


def density_to_grid(theta, basis: StatisticsBasis, region: Region, resolution: int = 500) -> DensityGrid:
    x = grid_points(region, resolution)
    return _from_log_values(basis.evaluate(x) @ np.asarray(theta, dtype=float), region, resolution)


def gaussian_grid(mu, Sigma, region: Region, resolution: int = 500) -> DensityGrid:
    x = grid_points(region, resolution)
    mu = np.atleast_1d(mu)
    P = np.linalg.inv(np.atleast_2d(Sigma))
    r = x - mu
    return _from_log_values(-0.5 * np.einsum("ni,ij,nj->n", r, P, r), region, resolution)


def histogram_to_grid(points: np.ndarray, region: Region, resolution: int = 500, weights=None) -> DensityGrid:
    """Bin particles on the grid cells; particles outside the box go to ``overflow``."""
    points = np.atleast_2d(points)
    n = points.shape[0]
    if weights is None:
        weights = np.full(n, 1.0 / n)
    inside = np.all((points >= region.lo) & (points < region.hi), axis=1)
    edges = [np.linspace(lo, hi, resolution + 1) for lo, hi in zip(region.lo, region.hi)]
    counts, _ = np.histogramdd(points[inside], bins=edges, weights=weights[inside])
    cell = float(np.prod((region.hi - region.lo) / resolution))
    return DensityGrid(region, resolution, counts / cell, overflow=int(n - inside.sum()))


def _check_same(a: DensityGrid, b: DensityGrid):
    if (
        a.resolution != b.resolution
        or not np.array_equal(a.region.lo, b.region.lo)
        or not np.array_equal(a.region.hi, b.region.hi)
    ):
        raise GridMismatchError("density grids differ in region or resolution")


def hellinger(a: DensityGrid, b: DensityGrid) -> float:
    """``sqrt(0.5 * integral (sqrt a - sqrt b)^2)``, clipped to [0, 1]."""
    _check_same(a, b)
    # sqrt(a) sqrt(b) form keeps the result symmetric and avoids cancellation
    bc = float(np.sum(np.sqrt(a.values * b.values)) * a.cell_measure)
    sq = 0.5 * (a.mass + b.mass) - bc
    return float(np.sqrt(min(max(sq, 0.0), 1.0)))


def kl(a: DensityGrid, b: DensityGrid) -> float:
    """``integral a log(a / b)``; cells with a > 0 = b contribute a capped penalty."""
    _check_same(a, b)
    pa = a.values.ravel()
    pb = b.values.ravel()
    pos = pa > 0
    both = pos & (pb > 0)
    # logs separately: subnormal b would overflow the ratio a / b
    total = np.sum(pa[both] * (np.log(pa[both]) - np.log(pb[both])))
    total += np.sum(pa[pos & ~(pb > 0)] * KL_CAP)
    return float(total * a.cell_measure)
