"""Scores for clustering agreement and coefficient-curve recovery."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network_data import CommunityLabels

__all__ = ["ClusteringScore", "nmi", "err_beta", "parameter_report"]


@dataclass(frozen=True, eq=False)
class ClusteringScore:
    """Agreement between two labelings: an index in [0, 1] plus the raw table."""

    nmi: float
    contingency: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.nmi <= 1.0:
            raise ValueError("nmi must lie in [0, 1]")
        if self.contingency.ndim != 2 or np.any(self.contingency < 0):
            raise ValueError("contingency must be a non-negative 2-D count table")


def _entropy(p):
    # Summing in sorted order gives a value that depends only on the
    # multiset of probabilities, not on the table's orientation.
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -float(np.sort(terms, axis=None).sum())


def nmi(a: CommunityLabels, b: CommunityLabels) -> ClusteringScore:
    """Normalized mutual information, 2 I(a;b) / (H(a) + H(b)).

    Invariant under relabeling of either argument and symmetric in its
    arguments. When both sides put every node in one community the value is
    defined as 1; a single-community side against a split side scores 0
    through the formula itself. 0 log 0 counts as 0 throughout.
    """
    if a.n != b.n:
        raise ValueError(f"labelings cover {a.n} and {b.n} nodes")
    if a.n == 0:
        raise ValueError("cannot score empty labelings")
    table = np.zeros((a.K, b.K), dtype=np.int64)
    np.add.at(table, (a.as_index(), b.as_index()), 1)
    joint = table / a.n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    ha, hb = _entropy(pa), _entropy(pb)
    if ha == 0.0 and hb == 0.0:
        return ClusteringScore(nmi=1.0, contingency=table)
    # I(a;b) = H(a) + H(b) - H(a,b); with the canonical summation order this
    # evaluates to exactly (H(a)+H(b))/2 for matching partitions, so
    # identical or relabeled inputs score exactly 1.
    info = max(ha + hb - _entropy(joint), 0.0)
    value = float(np.clip(2.0 * info / (ha + hb), 0.0, 1.0))
    return ClusteringScore(nmi=value, contingency=table)


def err_beta(est, truth) -> np.ndarray:
    """Component-wise mean squared error of a coefficient path over the grid."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.ndim != 2 or est.shape != truth.shape:
        raise ValueError(
            f"coefficient paths must share a (T, p) shape, got {est.shape} and {truth.shape}"
        )
    return np.mean((est - truth) ** 2, axis=0)


def _spread(values):
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 2:
        return None
    return np.std(values, axis=0, ddof=1)


def parameter_report(fits, truth, nmi_values=None, err_values=None) -> dict:
    """Bias and spread of the fitted parameters across repeated runs.

    Parameters
    ----------
    fits : FitResult or sequence of FitResult
        One entry per simulation run.
    truth : SimulationConfig
        The generating configuration; supplies the true phi and rho.
    nmi_values, err_values : optional sequences
        Per-run clustering scores and per-run err_beta vectors; summarized
        when given.

    Returns
    -------
    dict with n_runs, phi/rho bias and spread (spread is None for a single
    run), and mean/spread summaries for whichever optional scores were given.
    """
    if hasattr(fits, "phi_hat"):
        fits = [fits]
    fits = list(fits)
    if not fits:
        raise ValueError("at least one fit is required")
    phis = np.array([f.phi_hat for f in fits])
    rhos = np.array([f.rho_hat for f in fits])
    report = {
        "n_runs": len(fits),
        "phi_bias": float(phis.mean() - truth.phi),
        "phi_se": None if _spread(phis) is None else float(_spread(phis)),
        "rho_bias": float(rhos.mean() - truth.rho),
        "rho_se": None if _spread(rhos) is None else float(_spread(rhos)),
    }
    if nmi_values is not None:
        scores = np.asarray(nmi_values, dtype=float)
        report["nmi_mean"] = float(scores.mean())
        spread = _spread(scores)
        report["nmi_se"] = None if spread is None else float(spread)
    if err_values is not None:
        errors = np.atleast_2d(np.asarray(err_values, dtype=float))
        report["err_mean"] = errors.mean(axis=0)
        report["err_se"] = _spread(errors)
    return report
