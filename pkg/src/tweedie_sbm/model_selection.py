"""Smoothing-penalty selection by leave-one-out cross-validation over time.

Each interior grid time is held out in turn while the two endpoints are always
retained, the full two-step fit runs on the remaining points, and the fitted
spline predicts the coefficient path at the held-out time. The penalty with
the smallest mean held-out negative log-likelihood wins; exact ties go to the
larger (smoother) value.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import estimation, spline_basis, tweedie_core
from ._errors import DataError, FitError, NumericalError
from .network_data import DynamicNetwork, TimeGrid
from .spline_basis import CoefficientMatrix, SplineBasis

__all__ = ["CvReport", "DEFAULT_LAMBDA_GRID", "cross_validate", "held_out_beta",
           "write_cv_report"]

DEFAULT_LAMBDA_GRID = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0)

_FMT = "%.17g"


@dataclass(frozen=True, eq=False)
class CvReport:
    """Cross-validation summary over a penalty grid.

    ``losses``, ``fold_phi``, and ``fold_rho`` are (n_lambda, n_folds) arrays;
    a row of ``losses`` contains NaN entries exactly when that penalty was
    disqualified by a failed fold. ``lambda_grid`` is sorted ascending.
    """

    lambda_grid: tuple
    fold_times: np.ndarray
    losses: np.ndarray
    cv_error: np.ndarray
    lambda_star: float
    fold_phi: np.ndarray
    fold_rho: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        L, F = len(self.lambda_grid), self.fold_times.size
        if self.losses.shape != (L, F):
            raise ValueError("losses must have one row per penalty, one column per fold")
        if self.cv_error.shape != (L,):
            raise ValueError("cv_error must have one entry per penalty")
        valid = ~np.isnan(self.cv_error)
        if not valid.any():
            raise ValueError("cv_error contains no finite entries")
        best = np.nanmin(self.cv_error)
        star_error = self.cv_error[self.lambda_grid.index(self.lambda_star)]
        if not star_error <= best:
            raise ValueError("lambda_star does not attain the minimum cv_error")


def held_out_beta(basis: SplineBasis, eta, t: float) -> np.ndarray:
    """Coefficient vector predicted at time ``t`` from a fitted spline.

    ``basis`` is the basis the coefficients were fit on; ``t`` must lie inside
    its span, which covers every held-out time because the endpoints are
    always retained during training.
    """
    row = spline_basis.design_matrix(basis, np.atleast_1d(float(t)))
    coef = eta.eta if isinstance(eta, CoefficientMatrix) else np.asarray(eta, dtype=float)
    return (row @ coef)[0]


def _fold_training_data(network: DynamicNetwork, nu: int) -> DynamicNetwork:
    points = np.delete(network.grid.points, nu)
    return DynamicNetwork(grid=TimeGrid(points=points), Y=np.delete(network.Y, nu, axis=0))


def _fold_loss(network, covariates, nu, result, beta_t):
    iu = np.triu_indices(network.n, k=1)
    y = network.Y[nu][iu[0], iu[1]]
    idx = result.labels_hat.as_index()
    base = result.beta0_hat.beta0[idx[iu[0]], idx[iu[1]]]
    if covariates.p:
        base = base + beta_t @ covariates.X[:, iu[0], iu[1]]
    dens = tweedie_core.log_density_each(y, np.exp(base), result.phi_hat, result.rho_hat)
    return -float(np.sum(dens))


def cross_validate(network, covariates, config: estimation.FitConfig,
                   lambda_grid=None, rng=None, threads=None) -> CvReport:
    """Score each penalty by mean held-out negative log-likelihood.

    Every (penalty, fold) pair is an independent task: a full two-step fit on
    the T-1 training times, with the spline basis rebuilt on the training
    grid and the dispersion and power parameter re-estimated within the fold.
    A failed fold disqualifies its penalty; if every penalty is disqualified
    the first failure is re-raised inside a fit error.
    """
    T = network.T
    if T < 4:
        raise DataError(
            f"cross-validation needs at least 4 time points, got {T}"
        )
    if covariates.p and T < 5:
        raise DataError(
            "cross-validation with covariates needs at least 5 time points so "
            f"each training fold keeps a 4-point spline grid, got {T}"
        )
    grid = np.unique(np.asarray(
        DEFAULT_LAMBDA_GRID if lambda_grid is None else lambda_grid, dtype=float
    ))
    if grid.size == 0:
        raise ValueError("lambda_grid must be non-empty")
    if grid.min() < 0.0:
        raise ValueError("lambda_grid values must be non-negative")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    fold_nus = list(range(1, T - 1))
    F, L = len(fold_nus), grid.size
    fold_data = [_fold_training_data(network, nu) for nu in fold_nus]
    children = rng.spawn(L * F)
    p = covariates.p

    def run(task):
        li, fi = task
        fold_config = replace(config, lambda_vec=(grid[li],))
        try:
            result = estimation.fit(
                fold_data[fi], covariates, fold_config, rng=children[li * F + fi]
            )
            if p:
                basis = spline_basis.build(fold_data[fi].grid)
                beta_t = held_out_beta(basis, result.eta_hat, network.grid.points[fold_nus[fi]])
            else:
                beta_t = np.zeros(0)
            loss = _fold_loss(network, covariates, fold_nus[fi], result, beta_t)
            return loss, result.phi_hat, result.rho_hat, None
        except NumericalError as exc:
            return np.nan, np.nan, np.nan, exc

    tasks = [(li, fi) for li in range(L) for fi in range(F)]
    if threads is not None and int(threads) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            flat = list(pool.map(run, tasks))
    else:
        flat = [run(task) for task in tasks]

    losses = np.array([r[0] for r in flat]).reshape(L, F)
    fold_phi = np.array([r[1] for r in flat]).reshape(L, F)
    fold_rho = np.array([r[2] for r in flat]).reshape(L, F)
    with np.errstate(invalid="ignore"):
        cv_error = np.where(np.isnan(losses).any(axis=1), np.nan, losses.mean(axis=1))
    if np.isnan(cv_error).all():
        first_error = next(r[3] for r in flat if r[3] is not None)
        raise FitError(f"every penalty was disqualified by a failed fold: {first_error}")
    best = np.nanmin(cv_error)
    lambda_star = float(grid[np.where(cv_error == best)[0].max()])
    return CvReport(
        lambda_grid=tuple(float(v) for v in grid),
        fold_times=network.grid.points[fold_nus].copy(),
        losses=losses,
        cv_error=cv_error,
        lambda_star=lambda_star,
        fold_phi=fold_phi,
        fold_rho=fold_rho,
        metadata={
            "phi_rho_source": "fold fit",
            "n_disqualified": int(np.isnan(cv_error).sum()),
        },
    )


def write_cv_report(report: CvReport, path) -> None:
    """Per-fold rows, one mean row per penalty, and a final best row."""
    lines = ["lambda,fold,time,loss"]
    for li, lam in enumerate(report.lambda_grid):
        for fi, t in enumerate(report.fold_times):
            lines.append(",".join([
                _FMT % lam, str(fi + 1), _FMT % t, _FMT % report.losses[li, fi]
            ]))
    for li, lam in enumerate(report.lambda_grid):
        lines.append(",".join([_FMT % lam, "mean", "", _FMT % report.cv_error[li]]))
    star_error = report.cv_error[report.lambda_grid.index(report.lambda_star)]
    lines.append(",".join([_FMT % report.lambda_star, "best", "", _FMT % star_error]))
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
