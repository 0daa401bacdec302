"""One-dimensional modal DG fields and the two-stage bound limiter.

Cell polynomials are expanded in Legendre polynomials of the reference
coordinate xi in [-1, 1]; P_0 = 1 and the higher modes have zero mean, so
coefficient 0 is the cell average.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial import legendre as L

from .limiter import (
    DEFAULT_EPSILON,
    DEFAULT_MAX_ITERS,
    Bounds,
    DRResult,
    LimiterError,
    LimiterProblem,
    limit_cell_averages,
)


class CellAverageOutOfBoundsError(LimiterError):
    def __init__(self, cell: int, value: float):
        super().__init__(f"cell {cell} has average {value!r} outside the bounds")
        self.cell = cell
        self.value = value


@dataclass
class ModalField1D:
    coeffs: np.ndarray
    x_lo: float = 0.0
    x_hi: float = 1.0
    periodic: bool = True

    def __post_init__(self):
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if not self.x_hi > self.x_lo:
            raise ValueError("empty domain")

    @property
    def n_cells(self) -> int:
        return self.coeffs.shape[0]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def h(self) -> float:
        return (self.x_hi - self.x_lo) / self.n_cells

    @property
    def averages(self) -> np.ndarray:
        return self.coeffs[:, 0].copy()

    @property
    def mass(self) -> float:
        return self.h * math.fsum(self.coeffs[:, 0])

    def cell_centers(self) -> np.ndarray:
        return self.x_lo + (np.arange(self.n_cells) + 0.5) * self.h

    def values_at(self, xi) -> np.ndarray:
        """Point values at reference points `xi`; shape (n_cells, len(xi))."""
        return self.coeffs @ L.legvander(np.asarray(xi, dtype=float), self.degree).T

    def copy(self) -> "ModalField1D":
        return replace(self, coeffs=self.coeffs.copy())


def gauss_lobatto_points(n: int) -> np.ndarray:
    """n-point Gauss-Lobatto nodes on [-1, 1] (endpoints included)."""
    if n < 2:
        raise ValueError("Gauss-Lobatto needs at least two points")
    inner = L.Legendre.basis(n - 1).deriv().roots() if n > 2 else np.empty(0)
    return np.concatenate([[-1.0], np.sort(np.real(inner)), [1.0]])


def default_sample_points(degree: int) -> np.ndarray:
    return gauss_lobatto_points(degree + 2)


def l2_project(f, n_cells: int, degree: int, x_lo: float = 0.0, x_hi: float = 1.0,
               periodic: bool = True, n_quad: int | None = None) -> ModalField1D:
    """Cellwise L2 projection of a vectorized scalar function."""
    n_quad = n_quad or degree + 3
    xi, w = L.leggauss(n_quad)
    h = (x_hi - x_lo) / n_cells
    centers = x_lo + (np.arange(n_cells) + 0.5) * h
    fx = f(centers[:, None] + 0.5 * h * xi[None, :])
    V = L.legvander(xi, degree)
    norms = (2 * np.arange(degree + 1) + 1) / 2.0
    coeffs = (fx * w) @ V * norms
    return ModalField1D(coeffs, x_lo, x_hi, periodic)


def l2_error(field: ModalField1D, f, n_quad: int | None = None) -> float:
    n_quad = n_quad or field.degree + 5
    xi, w = L.leggauss(n_quad)
    x = field.cell_centers()[:, None] + 0.5 * field.h * xi[None, :]
    diff = field.values_at(xi) - f(x)
    return math.sqrt(0.5 * field.h * float(np.sum(diff**2 * w)))


def linf_error(field: ModalField1D, f, n_points: int = 16) -> float:
    xi = np.linspace(-1.0, 1.0, n_points)
    x = field.cell_centers()[:, None] + 0.5 * field.h * xi[None, :]
    return float(np.max(np.abs(field.values_at(xi) - f(x))))


def scaling_factor(avg, vmin, vmax, bounds: Bounds):
    """Zhang-Shu factor min{1, |m - avg|/|vmin - avg|, |M - avg|/|vmax - avg|}.

    Zero denominators (a constant polynomial) leave that term out.
    """
    avg, vmin, vmax = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (avg, vmin, vmax)))
    theta = np.ones(avg.shape)
    for bound, ext in ((bounds.m, vmin), (bounds.M, vmax)):
        den = np.abs(ext - avg)
        ok = den > 0.0
        ratio = np.full(avg.shape, np.inf)
        ratio[ok] = np.abs(bound - avg[ok]) / den[ok]
        theta = np.minimum(theta, ratio)
    return theta if theta.ndim else float(theta)


def zhang_shu_limit(field: ModalField1D, bounds: Bounds, points=None) -> ModalField1D:
    """Scale each cell polynomial toward its average until it fits [m, M] at `points`."""
    points = default_sample_points(field.degree) if points is None else np.asarray(points)
    avg = field.coeffs[:, 0]
    bad = np.flatnonzero((avg < bounds.m) | (avg > bounds.M))
    if bad.size:
        raise CellAverageOutOfBoundsError(int(bad[0]), float(avg[bad[0]]))
    vals = field.values_at(points)
    theta = scaling_factor(avg, vals.min(axis=1), vals.max(axis=1), bounds)
    out = field.copy()
    out.coeffs[:, 1:] *= theta[:, None]
    return out


def apply_two_stage_limiter(field: ModalField1D, bounds: Bounds,
                            epsilon: float = DEFAULT_EPSILON,
                            max_iters: int = DEFAULT_MAX_ITERS,
                            points=None, strict: bool = False):
    """Limit averages conservatively, shift each cell, then scale.

    Returns ``(limited_field, dr_result)``.
    """
    problem = LimiterProblem(field.averages, bounds)
    result = limit_cell_averages(problem, epsilon=epsilon, max_iters=max_iters, strict=strict)
    shifted = field.copy()
    # u_i - avg_i + x*_i: only the constant mode moves
    shifted.coeffs[:, 0] = result.x_star
    return zhang_shu_limit(shifted, bounds, points), result
