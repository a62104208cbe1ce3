"""Cubic B-spline basis on a time grid with a curvature penalty matrix.

The knot vector repeats one exterior knot four times on each side, placed one
average grid spacing beyond the observed range, so the basis spans cubics on
the padded interval and the curvature penalty has an affine null space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from ._errors import DataError
from .network_data import TimeGrid

__all__ = [
    "SplineBasis",
    "CoefficientMatrix",
    "build",
    "design_matrix",
    "evaluate",
    "penalty_value",
]

_DEGREE = 3


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Basis matrix and curvature penalty for one time grid.

    ``B`` is T x M with M = T + 4 cubic B-splines; ``Omega`` is the M x M
    matrix of integrated products of second derivatives over the padded
    interval.
    """

    grid: TimeGrid
    B: np.ndarray
    Omega: np.ndarray
    knots: np.ndarray

    def __post_init__(self):
        for name in ("B", "Omega", "knots"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_basis(self) -> int:
        return self.B.shape[1]

    @property
    def span(self) -> tuple:
        return float(self.knots[_DEGREE]), float(self.knots[-_DEGREE - 1])


@dataclass(frozen=True, eq=False)
class CoefficientMatrix:
    """Spline coefficients, one column per covariate (M x p)."""

    eta: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float)
        if eta.ndim != 2:
            raise ValueError(f"eta must be 2-D (n_basis x p), got shape {eta.shape}")
        if not np.all(np.isfinite(eta)):
            raise ValueError("eta contains non-finite values")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    @property
    def p(self) -> int:
        return self.eta.shape[1]


def build(grid: TimeGrid) -> SplineBasis:
    """Construct the cubic basis and exact curvature penalty for a grid."""
    t = grid.points
    T = t.size
    if T < 4:
        raise DataError(
            f"a cubic spline basis needs at least 4 time points, got {T}"
        )
    delta = (t[-1] - t[0]) / (T - 1)
    a, b = t[0] - delta, t[-1] + delta
    knots = np.concatenate([np.full(4, a), t, np.full(4, b)])
    B = BSpline.design_matrix(t, knots, _DEGREE).toarray()

    M = knots.size - _DEGREE - 1
    # Second derivatives are piecewise linear, so two Gauss-Legendre nodes
    # per knot interval integrate their products exactly.
    nodes, weights = [], []
    offset = 0.5 / np.sqrt(3.0)
    for lo, hi in zip(knots[:-1], knots[1:]):
        if hi > lo:
            mid, half = 0.5 * (lo + hi), hi - lo
            nodes.extend([mid - offset * half, mid + offset * half])
            weights.extend([0.5 * half, 0.5 * half])
    nodes = np.array(nodes)
    weights = np.array(weights)
    D2 = np.empty((M, nodes.size))
    eye = np.eye(M)
    for m in range(M):
        D2[m] = BSpline(knots, eye[m], _DEGREE).derivative(2)(nodes)
    Omega = (D2 * weights) @ D2.T
    Omega = 0.5 * (Omega + Omega.T)
    return SplineBasis(grid=grid, B=B, Omega=Omega, knots=knots)


def design_matrix(basis: SplineBasis, times) -> np.ndarray:
    """Evaluate every basis function at the given times (len(times) x M)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    lo, hi = basis.span
    if times.size and (times.min() < lo or times.max() > hi):
        raise ValueError(
            f"evaluation times must lie inside the knot span [{lo}, {hi}]"
        )
    return BSpline.design_matrix(times, basis.knots, _DEGREE).toarray()


def evaluate(basis: SplineBasis, eta) -> np.ndarray:
    """Coefficient functions at the grid points: beta = B eta, shape T x p."""
    eta = eta.eta if isinstance(eta, CoefficientMatrix) else np.asarray(eta, dtype=float)
    if eta.shape[0] != basis.n_basis:
        raise ValueError(
            f"eta has {eta.shape[0]} rows but the basis has {basis.n_basis} functions"
        )
    return basis.B @ eta


def penalty_value(basis: SplineBasis, eta, lambda_vec) -> float:
    """Curvature penalty 0.5 * sum_u lambda_u eta_u' Omega eta_u."""
    eta = eta.eta if isinstance(eta, CoefficientMatrix) else np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None]
    p = eta.shape[1]
    lam = np.broadcast_to(np.asarray(lambda_vec, dtype=float), (p,))
    if p and lam.min() < 0.0:
        raise ValueError("penalty weights must be non-negative")
    quad = np.einsum("mu,mk,ku->u", eta, basis.Omega, eta)
    return float(0.5 * np.sum(lam * quad))
