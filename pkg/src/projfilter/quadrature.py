"""Nested Gauss-Patterson sparse grids and their erf^-1 transform to R^d.

A grid starts life on (-1, 1)^d with Smolyak combination weights.  The
transform ``y = erfinv(x)`` moves it to R^d and folds the Jacobian into the
weights, so that ``sum_i w_i f(y_i)`` approximates the plain Lebesgue
integral of ``f`` over R^d.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from math import comb
from typing import Callable

import numpy as np
from scipy.special import erfinv

from . import _patterson_tables
from .errors import NonFiniteIntegrandError, TransformOverflowError, UnsupportedLevelError

MAX_1D_LEVEL = len(_patterson_tables.NODES)
# Smolyak level q uses 1D rules up to gauss_patterson_1d(q + 1)
MAX_SMOLYAK_LEVEL = MAX_1D_LEVEL - 1
MERGE_TOL = 1e-12
# |x| beyond this makes erfinv(x) overflow in double precision
_EDGE = 1.0 - 1e-15


@dataclass(frozen=True)
class Rule1D:
    level: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def exactness_degree(self) -> int:
        """Highest monomial degree integrated exactly on (-1, 1)."""
        if self.level == 1:
            return 1
        return 3 * 2 ** (self.level - 1) - 1


@dataclass(frozen=True)
class SparseGrid:
    """Quadrature nodes (N, d) and weights (N,).

    ``transformed`` is False for grids on (-1, 1)^d and True after
    :func:`transform_to_unbounded`.
    """

    dim: int
    level: int
    nodes: np.ndarray
    weights: np.ndarray
    transformed: bool = False

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"y{k + 1}" for k in range(self.dim)] + ["weight"])
            for node, w in zip(self.nodes, self.weights):
                writer.writerow([f"{v:.17g}" for v in node] + [f"{w:.17g}"])


def gauss_patterson_1d(level: int) -> Rule1D:
    """Return the ``2**level - 1`` point Gauss-Patterson rule on (-1, 1)."""
    if not isinstance(level, (int, np.integer)) or not 1 <= level <= MAX_1D_LEVEL:
        raise UnsupportedLevelError(
            f"Gauss-Patterson level must be in 1..{MAX_1D_LEVEL}, got {level!r}"
        )
    nodes = np.array(_patterson_tables.NODES[level - 1], dtype=float)
    weights = np.array(_patterson_tables.WEIGHTS[level - 1], dtype=float)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return Rule1D(int(level), nodes, weights)


def _merge(points: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort(points.T[::-1])
    points = points[order]
    weights = weights[order]
    merged_pts = [points[0]]
    merged_w = [weights[0]]
    for p, w in zip(points[1:], weights[1:]):
        if np.max(np.abs(p - merged_pts[-1])) <= MERGE_TOL:
            merged_w[-1] += w
        else:
            merged_pts.append(p)
            merged_w.append(w)
    return np.array(merged_pts), np.array(merged_w)


def smolyak_grid(dim: int, level: int) -> SparseGrid:
    """Smolyak sparse grid on (-1, 1)^d built from nested Patterson rules.

    ``level`` is the total (zero-based) Smolyak level q: the grid combines
    tensor rules whose zero-based 1D indices sum to at most q.  Level 0 is
    the single centre node; ``(dim=2, level=6)`` has 769 nodes.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not 0 <= level <= MAX_SMOLYAK_LEVEL:
        raise UnsupportedLevelError(
            f"Smolyak level must be in 0..{MAX_SMOLYAK_LEVEL}, got {level!r}"
        )
    rules = [gauss_patterson_1d(k + 1) for k in range(level + 1)]

    all_pts = []
    all_w = []
    for total in range(max(0, level - dim + 1), level + 1):
        coef = (-1) ** (level - total) * comb(dim - 1, level - total)
        for idx in _compositions(total, dim):
            sub = [rules[i] for i in idx]
            pts = np.array(list(itertools.product(*(r.nodes for r in sub))))
            w = np.prod(np.array(list(itertools.product(*(r.weights for r in sub)))), axis=1)
            all_pts.append(pts.reshape(-1, dim))
            all_w.append(coef * w)
    nodes, weights = _merge(np.vstack(all_pts), np.concatenate(all_w))
    return SparseGrid(dim, level, nodes, weights, transformed=False)


def _compositions(total: int, parts: int):
    """All tuples of ``parts`` non-negative ints summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def transform_to_unbounded(grid: SparseGrid) -> SparseGrid:
    """Map nodes through erf^-1 and fold the Jacobian into the weights.

    With ``x = erf(y)`` we have ``dx = (2/sqrt(pi)) exp(-y^2) dy``, hence
    ``w_s = (sqrt(pi)/2)^d exp(|y|^2) w``.
    """
    if grid.transformed:
        raise ValueError("grid is already transformed")
    if np.any(np.abs(grid.nodes) >= _EDGE):
        bad = int(np.argmax(np.max(np.abs(grid.nodes), axis=1)))
        raise TransformOverflowError(f"node {bad} too close to the boundary of (-1, 1)")
    y = erfinv(grid.nodes)
    w = (np.sqrt(np.pi) / 2.0) ** grid.dim * np.exp(np.sum(y**2, axis=1)) * grid.weights
    return SparseGrid(grid.dim, grid.level, y, w, transformed=True)


def unbounded_grid(dim: int, level: int) -> SparseGrid:
    """Shorthand for ``transform_to_unbounded(smolyak_grid(dim, level))``."""
    return transform_to_unbounded(smolyak_grid(dim, level))


def integrate(grid: SparseGrid, func: Callable[[np.ndarray], np.ndarray]) -> float:
    """Approximate the integral of ``func`` over the grid's domain.

    ``func`` receives all nodes at once as an (N, d) array and must return N
    values.
    """
    values = np.asarray(func(grid.nodes), dtype=float).reshape(-1)
    if values.shape[0] != grid.size:
        raise ValueError(f"integrand returned {values.shape[0]} values for {grid.size} nodes")
    finite = np.isfinite(values)
    if not finite.all():
        i = int(np.argmin(finite))
        raise NonFiniteIntegrandError(i, values[i])
    return float(np.dot(grid.weights, values))
