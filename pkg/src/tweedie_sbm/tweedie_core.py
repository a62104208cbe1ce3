"""Restricted Tweedie (compound Poisson-Gamma) distribution with power in (1, 2).

Two equivalent parameterizations are supported: the mean-value form
(mu, phi, rho) with variance phi * mu**rho, and the compound form
(lam, alpha, gamma) in which the variable is a Poisson(lam) number of
i.i.d. Gamma(alpha, gamma) summands. The law has an atom at zero of mass
exp(-lam) and a continuous positive part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from ._errors import NumericalError

__all__ = [
    "TweedieParams",
    "CompoundParams",
    "to_compound",
    "from_compound",
    "log_density",
    "log_density_each",
    "log_base_measure",
    "sample",
    "sample_each",
]

# Terms this far (natural log) below the running maximum cannot move a double.
_LOG_DROP = 37.0
_MAX_TERMS = 1_000_000
_BLOCK = 64


def _as_positive_float(value, name: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{name} must be a real number, got {value!r}") from exc
    if not math.isfinite(out) or out <= 0.0:
        raise ValueError(f"{name} must be finite and strictly positive, got {out!r}")
    return out


@dataclass(frozen=True)
class TweedieParams:
    """Mean-value parameterization of the restricted Tweedie law.

    Parameters
    ----------
    mu : float
        Mean, strictly positive.
    phi : float
        Dispersion, strictly positive; the variance is ``phi * mu**rho``.
    rho : float
        Power parameter, strictly inside the open interval (1, 2).
    """

    mu: float
    phi: float
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_positive_float(self.mu, "mu"))
        object.__setattr__(self, "phi", _as_positive_float(self.phi, "phi"))
        rho = float(self.rho)
        if not (math.isfinite(rho) and 1.0 < rho < 2.0):
            raise ValueError(f"rho must lie strictly inside (1, 2), got {rho!r}")
        object.__setattr__(self, "rho", rho)

    @property
    def variance(self) -> float:
        return self.phi * self.mu**self.rho


@dataclass(frozen=True)
class CompoundParams:
    """Compound Poisson-Gamma parameterization.

    Parameters
    ----------
    lam : float
        Poisson rate of the number of summands, strictly positive.
    alpha : float
        Gamma shape of each summand, strictly positive.
    gamma : float
        Gamma scale of each summand, strictly positive.
    """

    lam: float
    alpha: float
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "lam", _as_positive_float(self.lam, "lam"))
        object.__setattr__(self, "alpha", _as_positive_float(self.alpha, "alpha"))
        object.__setattr__(self, "gamma", _as_positive_float(self.gamma, "gamma"))


def to_compound(params: TweedieParams) -> CompoundParams:
    """Map (mu, phi, rho) to the compound form (lam, alpha, gamma).

    The three relations are ``lam = mu**(2-rho) / (phi * (2-rho))``,
    ``alpha = (2-rho) / (rho-1)`` and ``gamma = phi * (rho-1) * mu**(rho-1)``;
    they force ``lam * alpha * gamma == mu``.
    """
    mu, phi, rho = params.mu, params.phi, params.rho
    lam = mu ** (2.0 - rho) / (phi * (2.0 - rho))
    alpha = (2.0 - rho) / (rho - 1.0)
    gamma = phi * (rho - 1.0) * mu ** (rho - 1.0)
    return CompoundParams(lam=lam, alpha=alpha, gamma=gamma)


def from_compound(params: CompoundParams) -> TweedieParams:
    """Invert :func:`to_compound`.

    Solving the three relations gives ``rho = (alpha+2) / (alpha+1)``,
    ``mu = lam * alpha * gamma`` and ``phi = gamma / ((rho-1) * mu**(rho-1))``.
    """
    alpha = params.alpha
    rho = (alpha + 2.0) / (alpha + 1.0)
    mu = params.lam * alpha * params.gamma
    phi = params.gamma / ((rho - 1.0) * mu ** (rho - 1.0))
    return TweedieParams(mu=mu, phi=phi, rho=rho)


def _series_log_a(y: np.ndarray, phi: float, rho: float) -> np.ndarray:
    """Log of the series factor a(y, phi, rho) for strictly positive 1-D ``y``.

    Sums terms exp(j*d - lgamma(j+1) - lgamma(j*alpha)) outward from the
    index where the summand peaks, in log space, until additional terms are
    below the running maximum by a margin that cannot affect a double.
    """
    alpha = (2.0 - rho) / (rho - 1.0)
    logy = np.log(y)
    d = alpha * logy - (
        alpha * math.log(rho - 1.0) + (1.0 + alpha) * math.log(phi) + math.log(2.0 - rho)
    )

    j_peak = np.maximum(np.floor(y ** (2.0 - rho) / (phi * (2.0 - rho))), 1.0)
    run_max = j_peak * d - gammaln(j_peak + 1.0) - gammaln(j_peak * alpha)
    run_sum = np.ones_like(run_max)
    n_terms = np.ones_like(run_max)

    for direction in (1.0, -1.0):
        active = np.arange(y.size)
        base = j_peak.copy()
        offsets = direction * (np.arange(_BLOCK, dtype=float) + 1.0)
        while active.size:
            j = base[active, None] + offsets[None, :]
            valid = j >= 1.0
            j_safe = np.where(valid, j, 1.0)
            t = j_safe * d[active, None] - gammaln(j_safe + 1.0) - gammaln(j_safe * alpha)
            t = np.where(valid, t, -np.inf)

            block_max = t.max(axis=1)
            new_max = np.maximum(run_max[active], block_max)
            run_sum[active] = run_sum[active] * np.exp(run_max[active] - new_max) + np.exp(
                t - new_max[:, None]
            ).sum(axis=1)
            run_max[active] = new_max
            n_terms[active] += valid.sum(axis=1)

            if n_terms.max() > _MAX_TERMS:
                raise NumericalError(
                    "series for the density's series factor exceeded "
                    f"{_MAX_TERMS} terms; parameters are pathological"
                )
            keep = (block_max > new_max - _LOG_DROP) & valid.all(axis=1)
            base[active] += direction * _BLOCK
            active = active[keep]

    return run_max + np.log(run_sum) - logy


def log_base_measure(y, phi: float, rho: float):
    """Log of the density factor that does not involve the mean.

    For y > 0 this is the log of the summed series divided by y; at y == 0
    it is exactly 0. Accepts a scalar or an array of non-negative values.
    """
    phi = _as_positive_float(phi, "phi")
    if not 1.0 < float(rho) < 2.0:
        raise ValueError(f"rho must lie strictly inside (1, 2), got {rho!r}")
    arr = np.asarray(y, dtype=float)
    scalar = arr.ndim == 0
    flat = np.atleast_1d(arr).ravel()
    if flat.size and (not np.all(np.isfinite(flat)) or flat.min() < 0.0):
        raise ValueError("y must be finite and non-negative")
    out = np.zeros_like(flat)
    pos = flat > 0.0
    if pos.any():
        out[pos] = _series_log_a(flat[pos], phi, float(rho))
    out = out.reshape(arr.shape)
    return float(out) if scalar else out


def log_density_each(y, mu, phi: float, rho: float):
    """Elementwise log-density with per-element mean and shared (phi, rho).

    ``y`` and ``mu`` broadcast against each other; ``y`` entries must be
    non-negative and ``mu`` entries strictly positive.
    """
    phi = _as_positive_float(phi, "phi")
    rho = float(rho)
    if not 1.0 < rho < 2.0:
        raise ValueError(f"rho must lie strictly inside (1, 2), got {rho!r}")
    y_arr, mu_arr = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(mu, dtype=float))
    scalar = y_arr.ndim == 0
    y_flat = np.atleast_1d(y_arr).ravel()
    mu_flat = np.atleast_1d(mu_arr).ravel()
    if y_flat.size:
        if not np.all(np.isfinite(y_flat)) or y_flat.min() < 0.0:
            raise ValueError("y must be finite and non-negative")
        if not np.all(np.isfinite(mu_flat)) or mu_flat.min() <= 0.0:
            raise ValueError("mu must be finite and strictly positive")
    out = (
        y_flat * mu_flat ** (1.0 - rho) / (1.0 - rho) - mu_flat ** (2.0 - rho) / (2.0 - rho)
    ) / phi
    pos = y_flat > 0.0
    if pos.any():
        out[pos] += _series_log_a(y_flat[pos], phi, rho)
    out = out.reshape(y_arr.shape)
    return float(out) if scalar else out


def log_density(y, params: TweedieParams):
    """Log-density of the restricted Tweedie law at ``y`` (scalar or array).

    At y == 0 the value is exactly ``-mu**(2-rho) / (phi * (2-rho))``, the
    log of the atom mass exp(-lam).
    """
    return log_density_each(y, params.mu, params.phi, params.rho)


def sample_each(mu, phi: float, rho: float, rng: np.random.Generator) -> np.ndarray:
    """One draw per element of ``mu``, sharing (phi, rho).

    Each draw is a Poisson(lam) number of Gamma(alpha, gamma) summands,
    collapsed through Gamma additivity into a single Gamma(N * alpha, gamma)
    draw when N > 0 and exactly 0.0 when N == 0.
    """
    phi = _as_positive_float(phi, "phi")
    rho = float(rho)
    if not 1.0 < rho < 2.0:
        raise ValueError(f"rho must lie strictly inside (1, 2), got {rho!r}")
    mu_arr = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu_arr.size and (not np.all(np.isfinite(mu_arr)) or mu_arr.min() <= 0.0):
        raise ValueError("mu must be finite and strictly positive")
    alpha = (2.0 - rho) / (rho - 1.0)
    lam = mu_arr ** (2.0 - rho) / (phi * (2.0 - rho))
    gamma = phi * (rho - 1.0) * mu_arr ** (rho - 1.0)
    counts = rng.poisson(lam)
    out = np.zeros(mu_arr.shape)
    hit = counts > 0
    if hit.any():
        out[hit] = rng.gamma(counts[hit] * alpha, gamma[hit])
    return out


def sample(params: TweedieParams, rng: np.random.Generator, size=None):
    """Draw from the law; a scalar when ``size`` is None, else an array.

    All randomness comes from the caller-owned generator, so identical seeds
    yield identical draws.
    """
    if size is None:
        comp = to_compound(params)
        count = rng.poisson(comp.lam)
        if count == 0:
            return 0.0
        return float(rng.gamma(count * comp.alpha, comp.gamma))
    mu = np.full(size, params.mu, dtype=float)
    return sample_each(mu, params.phi, params.rho, rng)
