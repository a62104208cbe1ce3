"""Two-step estimation for block models with compound Poisson-Gamma weights.

Step 1 estimates the time-varying covariate coefficients by maximizing a
profile objective that is valid under an arbitrary community assignment.
Step 2 runs coordinate-ascent variational inference for the memberships,
community proportions, block intercepts, and dispersion, with the power
parameter chosen afterwards by a grid search on the full log-likelihood.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import spline_basis, tweedie_core
from ._errors import (
    AllZeroBlockError,
    DataError,
    FitError,
    NumericalError,
    OptimizerError,
    UndefinedBlockError,
)
from .network_data import CommunityLabels, CovariateSet, DynamicNetwork, TimeGrid
from .spline_basis import CoefficientMatrix, SplineBasis

__all__ = [
    "BlockIntercepts",
    "VariationalState",
    "FitConfig",
    "FitResult",
    "theta_gamma_hat",
    "beta0_mle",
    "profile_loglik",
    "estimate_beta_t",
    "update_tau",
    "update_pi",
    "update_beta0",
    "update_phi",
    "elbo",
    "fit_step2",
    "fit",
    "full_loglik",
    "write_fit_result",
    "read_fit_result",
]

_SOFT_MASS_FLOOR = 1e-8
_TAU_FLOOR = 1e-12
_RIDGE = 1e-8
_PHI_BOUNDS = (1e-4, 1e4)
_FMT = "%.17g"
_TAU_SOLVE_TOL = 1e-10
_TAU_SOLVE_MAX = 500
_INIT_DIAG_TILT = 0.5


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BlockIntercepts:
    """Symmetric K x K matrix of block intercepts on the log scale."""

    beta0: np.ndarray

    def __post_init__(self):
        beta0 = np.array(self.beta0, dtype=float)
        if beta0.ndim != 2 or beta0.shape[0] != beta0.shape[1]:
            raise ValueError(f"beta0 must be square, got shape {beta0.shape}")
        if not np.all(np.isfinite(beta0)):
            raise ValueError("beta0 contains non-finite values")
        if not np.array_equal(beta0, beta0.T):
            raise ValueError("beta0 must be symmetric")
        beta0.setflags(write=False)
        object.__setattr__(self, "beta0", beta0)

    @property
    def K(self) -> int:
        return self.beta0.shape[0]


@dataclass(frozen=True, eq=False)
class VariationalState:
    """Current variational solution: memberships, proportions, intercepts, dispersion."""

    tau: np.ndarray
    pi: np.ndarray
    beta0: BlockIntercepts
    phi: float

    def __post_init__(self):
        tau = np.array(self.tau, dtype=float)
        pi = np.array(self.pi, dtype=float)
        if tau.ndim != 2:
            raise ValueError("tau must be an n x K matrix")
        if tau.min() < 0.0:
            raise ValueError("tau entries must be non-negative")
        if np.abs(tau.sum(axis=1) - 1.0).max() > 1e-10:
            raise ValueError("tau rows must sum to 1 within 1e-10")
        K = tau.shape[1]
        if pi.shape != (K,) or pi.min() < 0.0 or abs(pi.sum() - 1.0) > 1e-8:
            raise ValueError("pi must be a length-K probability vector")
        if self.beta0.K != K:
            raise ValueError("beta0 size does not match tau")
        if not float(self.phi) > 0.0:
            raise ValueError("phi must be strictly positive")
        tau.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "phi", float(self.phi))

    @property
    def K(self) -> int:
        return self.tau.shape[1]

    def hard_labels(self) -> CommunityLabels:
        return CommunityLabels(labels=np.argmax(self.tau, axis=1) + 1, K=self.K)


_DEFAULT_RHO_GRID = (1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9)


@dataclass(frozen=True, eq=False)
class FitConfig:
    """Settings for the two-step fit.

    ``n_starts`` left as None picks 30 restarts when there are no covariates
    or fewer than 4 time points, and 10 otherwise.
    """

    K: int
    rho_grid: tuple = _DEFAULT_RHO_GRID
    lambda_vec: object = 0.5
    n_starts: int | None = None
    max_iters: int = 200
    tol_elbo: float = 1e-6
    seed: int | None = None
    phi_bounds: tuple = _PHI_BOUNDS

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError("K must be at least 1")
        grid = tuple(float(r) for r in np.atleast_1d(self.rho_grid))
        if not grid:
            raise ValueError("rho_grid must be non-empty")
        for r in grid:
            if not 1.0 < r < 2.0:
                raise ValueError(f"rho_grid values must lie in (1, 2), got {r}")
        object.__setattr__(self, "rho_grid", grid)
        lam = np.atleast_1d(np.asarray(self.lambda_vec, dtype=float))
        if lam.size and lam.min() < 0.0:
            raise ValueError("lambda_vec must be non-negative")
        object.__setattr__(self, "lambda_vec", tuple(float(v) for v in lam))
        if self.n_starts is not None and int(self.n_starts) < 1:
            raise ValueError("n_starts must be at least 1")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be at least 1")
        if not float(self.tol_elbo) > 0.0:
            raise ValueError("tol_elbo must be positive")
        lo, hi = (float(b) for b in self.phi_bounds)
        if not 0.0 < lo < hi:
            raise ValueError("phi_bounds must satisfy 0 < lo < hi")
        object.__setattr__(self, "phi_bounds", (lo, hi))

    def resolve_n_starts(self, p: int, T: int) -> int:
        if self.n_starts is not None:
            return int(self.n_starts)
        return 10 if (p >= 1 and T >= 4) else 30

    def resolve_lambda(self, p: int) -> np.ndarray:
        lam = np.asarray(self.lambda_vec, dtype=float)
        if lam.size == p:
            return lam
        if lam.size == 1:
            return np.full(p, lam[0])
        raise ValueError(f"lambda_vec has {lam.size} entries but there are {p} covariates")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Everything the two-step fit produced, for the selected rho."""

    rho_hat: float
    phi_hat: float
    beta0_hat: BlockIntercepts
    eta_hat: CoefficientMatrix | None
    beta_hat: np.ndarray
    tau_hat: np.ndarray
    pi_hat: np.ndarray
    labels_hat: CommunityLabels
    final_loglik: float
    final_elbo: float
    iterations: int
    converged: bool
    phi_boundary: bool
    grid: TimeGrid
    per_rho: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Shared pairwise precomputation
# ---------------------------------------------------------------------------


def _pair_arrays(network: DynamicNetwork, covariates: CovariateSet):
    if covariates.n != network.n:
        raise DataError(
            f"covariates are for {covariates.n} nodes but the network has {network.n}"
        )
    n = network.n
    iu = np.triu_indices(n, k=1)
    y_pairs = network.Y[:, iu[0], iu[1]]
    x_pairs = covariates.X[:, iu[0], iu[1]] if covariates.p else np.zeros((0, iu[0].size))
    return iu, y_pairs, x_pairs


def _check_beta_eval(beta_eval, T: int, p: int) -> np.ndarray:
    beta_eval = np.asarray(beta_eval, dtype=float)
    if beta_eval.shape != (T, p):
        raise ValueError(
            f"beta_eval must have shape (T, p) = ({T}, {p}), got {beta_eval.shape}"
        )
    if beta_eval.size and not np.all(np.isfinite(beta_eval)):
        raise ValueError("beta_eval contains non-finite values")
    return beta_eval


class _Workspace:
    """Per-(data, beta, rho) sufficient statistics shared by the VI updates.

    ``A`` and ``G`` hold the time-aggregated response and exposure weights as
    full symmetric matrices with zero diagonals; the series part of the
    log-likelihood is cached per dispersion value because it is the one
    expensive quantity the coordinate updates revisit.
    """

    def __init__(self, network, covariates, beta_eval, rho):
        iu, y_pairs, x_pairs = _pair_arrays(network, covariates)
        T, p = network.T, covariates.p
        beta_eval = _check_beta_eval(beta_eval, T, p)
        rho = float(rho)
        if not 1.0 < rho < 2.0:
            raise ValueError(f"rho must lie in (1, 2), got {rho}")
        self.rho = rho
        self.n = network.n
        self.iu = iu
        xb = beta_eval @ x_pairs if p else np.zeros((T, iu[0].size))
        e1 = np.exp((1.0 - rho) * xb)
        a_pairs = np.where(y_pairs > 0.0, y_pairs * e1, 0.0).sum(axis=0)
        g_pairs = np.exp((2.0 - rho) * xb).sum(axis=0)
        n_ = self.n
        self.A = np.zeros((n_, n_))
        self.A[iu] = a_pairs
        self.A += self.A.T
        self.G = np.zeros((n_, n_))
        self.G[iu] = g_pairs
        self.G += self.G.T
        self._y_pos = y_pairs[y_pairs > 0.0]
        self._loga = {}

    def loga_sum(self, phi: float) -> float:
        """Series part of the log-likelihood, summed over positive responses."""
        key = float(phi)
        if key not in self._loga:
            if self._y_pos.size:
                value = float(np.sum(tweedie_core._series_log_a(self._y_pos, key, self.rho)))
            else:
                value = 0.0
            self._loga[key] = value
        return self._loga[key]


# ---------------------------------------------------------------------------
# Step 1: profile objective under arbitrary labels
# ---------------------------------------------------------------------------


def _single_group(n: int) -> CommunityLabels:
    return CommunityLabels(labels=np.ones(n, dtype=np.int64), K=1)


def _block_accumulate(values, ka, kb, K, n):
    """Ordered-pair block sums scaled by 1 / (n (n - 1)).

    The two scatter passes visit mirrored entries in different orders, so the
    result is averaged with its transpose to make the symmetry bitwise.
    """
    out = np.zeros((K, K))
    np.add.at(out, (ka, kb), values)
    np.add.at(out, (kb, ka), values)
    out = 0.5 * (out + out.T)
    return out / (n * (n - 1.0))


def theta_gamma_hat(network, covariates, beta_eval, rho, labels):
    """Block-wise response and exposure averages at a fixed coefficient path.

    Parameters
    ----------
    network, covariates : the observed data.
    beta_eval : (T, p) array
        Covariate coefficients evaluated at the grid times.
    rho : float
        Power parameter in (1, 2).
    labels : CommunityLabels
        Any community assignment; the result is symmetric in the block pair.

    Returns
    -------
    (theta, gamma) : pair of K x K symmetric matrices.
    """
    iu, y_pairs, x_pairs = _pair_arrays(network, covariates)
    beta_eval = _check_beta_eval(beta_eval, network.T, covariates.p)
    rho = float(rho)
    if labels.n != network.n:
        raise ValueError(f"labels are for {labels.n} nodes, network has {network.n}")
    xb = beta_eval @ x_pairs if covariates.p else np.zeros_like(y_pairs)
    a_pairs = np.where(y_pairs > 0.0, y_pairs * np.exp((1.0 - rho) * xb), 0.0).sum(axis=0)
    g_pairs = np.exp((2.0 - rho) * xb).sum(axis=0)
    idx = labels.as_index()
    ka, kb = idx[iu[0]], idx[iu[1]]
    n = network.n
    theta = _block_accumulate(a_pairs, ka, kb, labels.K, n)
    gamma = _block_accumulate(g_pairs, ka, kb, labels.K, n)
    return theta, gamma


def _first_bad_block(mask) -> tuple:
    k, l = np.argwhere(mask)[0]
    return (int(k) + 1, int(l) + 1)


def beta0_mle(theta_hat, gamma_hat) -> BlockIntercepts:
    """Closed-form block intercepts: elementwise log(theta / gamma).

    Blocks with no pair mass are undefined and raise; blocks whose responses
    are all zero would need an intercept of -infinity and raise too.
    """
    theta = np.asarray(theta_hat, dtype=float)
    gamma = np.asarray(gamma_hat, dtype=float)
    if theta.shape != gamma.shape or theta.ndim != 2:
        raise ValueError("theta_hat and gamma_hat must be equal-shape square matrices")
    empty = gamma <= 0.0
    if empty.any():
        raise UndefinedBlockError(_first_bad_block(empty))
    all_zero = theta <= 0.0
    if all_zero.any():
        raise AllZeroBlockError(_first_bad_block(all_zero))
    return BlockIntercepts(beta0=np.log(theta / gamma))


def _profile_terms(theta, gamma, rho):
    """Sum of theta^(2-rho) gamma^(rho-1) over ordered blocks, scaled negative."""
    with np.errstate(invalid="ignore"):
        terms = np.where(gamma > 0.0, theta ** (2.0 - rho) * gamma ** (rho - 1.0), 0.0)
    return float(terms.sum()) / ((1.0 - rho) * (2.0 - rho))


def profile_loglik(network, covariates, beta_eval, rho, labels) -> float:
    """Profile objective with the intercepts maximized out, dispersion at 1.

    Empty blocks contribute zero; blocks holding pairs whose responses are
    all zero raise, matching :func:`beta0_mle`.
    """
    theta, gamma = theta_gamma_hat(network, covariates, beta_eval, rho, labels)
    bad = (gamma > 0.0) & (theta <= 0.0)
    if bad.any():
        raise AllZeroBlockError(_first_bad_block(bad))
    return _profile_terms(theta, gamma, float(rho))


def _profile_value_grad_factory(network, covariates, rho, labels):
    """Closure computing the profile objective and its (T, p) gradient in beta."""
    iu, y_pairs, x_pairs = _pair_arrays(network, covariates)
    idx = labels.as_index()
    ka, kb = idx[iu[0]], idx[iu[1]]
    K, n = labels.K, network.n
    c_pairs = n * (n - 1.0) / 2.0
    rho = float(rho)

    def value_grad(beta_eval):
        with np.errstate(over="ignore", invalid="ignore"):
            xb = beta_eval @ x_pairs if x_pairs.shape[0] else np.zeros_like(y_pairs)
            e1 = np.exp((1.0 - rho) * xb)
            e2 = np.exp((2.0 - rho) * xb)
            ye1 = np.where(y_pairs > 0.0, y_pairs * e1, 0.0)
            theta = _block_accumulate(ye1.sum(axis=0), ka, kb, K, n)
            gamma = _block_accumulate(e2.sum(axis=0), ka, kb, K, n)
            value = _profile_terms(theta, gamma, rho)
            r = np.where(gamma > 0.0, theta / np.where(gamma > 0.0, gamma, 1.0), 0.0)
            r1 = np.where(r > 0.0, r ** (1.0 - rho), 0.0)
            r2 = np.where(r > 0.0, r ** (2.0 - rho), 0.0)
            W = ye1 * r1[ka, kb][None, :] - e2 * r2[ka, kb][None, :]
            grad = (W @ x_pairs.T) / c_pairs if x_pairs.shape[0] else np.zeros((y_pairs.shape[0], 0))
        return value, grad

    return value_grad


def _maximize_bfgs(fun_grad, x0, max_iters=500, grad_tol=1e-6):
    """Quasi-Newton ascent with backtracking; returns (x, f, iterations).

    ``fun_grad`` maps a flat vector to (objective, gradient). Convergence when
    the gradient infinity norm drops below grad_tol * (1 + |objective|).
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    if not math.isfinite(f):
        raise OptimizerError("objective not finite at the starting point", x, float("nan"))
    H = np.eye(x.size)
    for it in range(max_iters):
        gnorm = float(np.abs(g).max()) if g.size else 0.0
        if gnorm < grad_tol * (1.0 + abs(f)):
            return x, f, it
        d = H @ g
        slope = float(g @ d)
        if slope <= 0.0:
            H = np.eye(x.size)
            d = g.copy()
            slope = float(g @ g)
        step = 1.0
        while True:
            x_new = x + step * d
            f_new, g_new = fun_grad(x_new)
            if math.isfinite(f_new) and f_new >= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-16:
                raise OptimizerError("line search stalled", x, gnorm)
        s = x_new - x
        yv = g - g_new  # gradient change of the negated objective
        sy = float(s @ yv)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            Hy = H @ yv
            coef = (sy + float(yv @ Hy)) / sy**2
            Hs = np.outer(Hy, s)
            H = H + coef * np.outer(s, s) - (Hs + Hs.T) / sy
        x, f, g = x_new, f_new, g_new
    raise OptimizerError(
        f"no convergence after {max_iters} iterations",
        x,
        float(np.abs(g).max()) if g.size else 0.0,
    )


def estimate_beta_t(
    network,
    covariates,
    rho,
    lambda_vec,
    basis: SplineBasis | None = None,
    labels: CommunityLabels | None = None,
    max_iters: int = 500,
    grad_tol: float = 1e-6,
) -> CoefficientMatrix:
    """Penalized profile estimate of the spline coefficients.

    Maximizes the profile objective of the coefficient path B eta minus the
    curvature penalty. ``labels`` defaults to a single group, which is enough
    for consistency; any other assignment gives asymptotically the same
    estimate. Columns with a zero penalty weight receive a tiny ridge so the
    spline parameterization stays identified.
    """
    if basis is None:
        basis = spline_basis.build(network.grid)
    if labels is None:
        labels = _single_group(network.n)
    p = covariates.p
    lam = np.broadcast_to(np.asarray(lambda_vec, dtype=float), (p,)).copy()
    if p and lam.min() < 0.0:
        raise ValueError("penalty weights must be non-negative")
    M = basis.n_basis
    if p == 0:
        return CoefficientMatrix(eta=np.zeros((M, 0)))
    profile = _profile_value_grad_factory(network, covariates, rho, labels)
    B, Omega = basis.B, basis.Omega
    ridge_cols = lam == 0.0

    def objective(eta_flat):
        eta = eta_flat.reshape(M, p)
        value, D = profile(B @ eta)
        quad = np.einsum("mu,mk,ku->u", eta, Omega, eta)
        value -= 0.5 * float(np.sum(lam * quad))
        grad = B.T @ D - (Omega @ eta) * lam[None, :]
        if ridge_cols.any():
            value -= 0.5 * _RIDGE * float(np.sum(eta[:, ridge_cols] ** 2))
            grad[:, ridge_cols] -= _RIDGE * eta[:, ridge_cols]
        return value, grad.ravel()

    eta_hat, _, _ = _maximize_bfgs(
        objective, np.zeros(M * p), max_iters=max_iters, grad_tol=grad_tol
    )
    return CoefficientMatrix(eta=eta_hat.reshape(M, p))


def _estimate_beta_direct(network, covariates, rho, labels=None, max_iters=500, grad_tol=1e-6):
    """Unpenalized per-time coefficients for grids too short for a spline."""
    if labels is None:
        labels = _single_group(network.n)
    T, p = network.T, covariates.p
    if p == 0:
        return np.zeros((T, 0))
    profile = _profile_value_grad_factory(network, covariates, rho, labels)

    def objective(beta_flat):
        value, D = profile(beta_flat.reshape(T, p))
        return value, D.ravel()

    beta_hat, _, _ = _maximize_bfgs(
        objective, np.zeros(T * p), max_iters=max_iters, grad_tol=grad_tol
    )
    return beta_hat.reshape(T, p)


# ---------------------------------------------------------------------------
# Step 2: coordinate-ascent variational inference
# ---------------------------------------------------------------------------


def _intercept_weights(beta0, rho):
    B = beta0.beta0 if isinstance(beta0, BlockIntercepts) else np.asarray(beta0, dtype=float)
    return np.exp((1.0 - rho) * B), np.exp((2.0 - rho) * B)


def _tau_update(ws, tau, pi, beta0, phi):
    M1, M2 = _intercept_weights(beta0, ws.rho)
    with np.errstate(divide="ignore"):
        F = np.log(pi)[None, :]
    F = F + (ws.A @ (tau @ M1)) / ((1.0 - ws.rho) * phi)
    F = F - (ws.G @ (tau @ M2)) / ((2.0 - ws.rho) * phi)
    F -= F.max(axis=1, keepdims=True)
    out = np.exp(F)
    out /= out.sum(axis=1, keepdims=True)
    out = np.maximum(out, _TAU_FLOOR)
    out /= out.sum(axis=1, keepdims=True)
    return out


def _tau_solve(ws, tau, pi, beta0, phi):
    """Membership subproblem solved by sweeping ``_tau_update`` to stability.

    A single sweep moves every row once given the previous memberships; the
    subproblem's maximizer is the fixed point of that map. Stopping on the
    sup-norm change keeps the solve deterministic.
    """
    for _ in range(_TAU_SOLVE_MAX):
        new = _tau_update(ws, tau, pi, beta0, phi)
        done = np.max(np.abs(new - tau)) < _TAU_SOLVE_TOL
        tau = new
        if done:
            break
    return tau


def _soft_block_stats(ws, tau):
    N1 = tau.T @ ws.A @ tau
    N1 = 0.5 * (N1 + N1.T)
    N2 = tau.T @ ws.G @ tau
    N2 = 0.5 * (N2 + N2.T)
    s = tau.sum(axis=0)
    mass = np.outer(s, s) - tau.T @ tau
    return N1, N2, mass


def _beta0_update(ws, tau, prev):
    """Soft-weighted intercept update; blocks without mass keep their value."""
    N1, N2, mass = _soft_block_stats(ws, tau)
    active = mass >= _SOFT_MASS_FLOOR
    bad = active & (N1 <= 0.0)
    if bad.any():
        raise AllZeroBlockError(_first_bad_block(bad))
    out = np.array(prev, dtype=float)
    out[active] = np.log(N1[active] / N2[active])
    return out


def _phi_objective_constant(ws, tau, beta0):
    labels = np.argmax(tau, axis=1)
    K = tau.shape[1]
    Z = np.zeros((ws.n, K))
    Z[np.arange(ws.n), labels] = 1.0
    ZA = Z.T @ ws.A @ Z
    ZG = Z.T @ ws.G @ Z
    M1, M2 = _intercept_weights(beta0, ws.rho)
    return 0.5 * (
        float(np.sum(M1 * ZA)) / (1.0 - ws.rho) - float(np.sum(M2 * ZG)) / (2.0 - ws.rho)
    )


def _phi_update(ws, tau, beta0, bounds=_PHI_BOUNDS, tol=1e-6, max_probes=200):
    """Golden-section maximization of the hard-label likelihood over log phi.

    Returns (phi, boundary flag, probe count).
    """
    S = _phi_objective_constant(ws, tau, beta0)

    def h(u):
        return ws.loga_sum(math.exp(u)) + S * math.exp(-u)

    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = h(c), h(d)
    probes = 2
    while b - a > tol and probes < max_probes:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = h(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = h(d)
        probes += 1
    u = 0.5 * (a + b)
    boundary = (u - lo) < 1e-3 or (hi - u) < 1e-3
    return math.exp(u), boundary, probes


def _elbo(ws, tau, pi, beta0, phi):
    N1 = tau.T @ ws.A @ tau
    N2 = tau.T @ ws.G @ tau
    M1, M2 = _intercept_weights(beta0, ws.rho)
    pair_term = 0.5 * (
        float(np.sum(M1 * N1)) / (1.0 - ws.rho) - float(np.sum(M2 * N2)) / (2.0 - ws.rho)
    )
    # 0 * log 0 := 0 in both the prior and entropy sums.
    with np.errstate(divide="ignore", invalid="ignore"):
        prior_term = float(np.sum(np.where(tau > 0.0, tau * np.log(pi)[None, :], 0.0)))
        entropy = -float(np.sum(np.where(tau > 0.0, tau * np.log(tau), 0.0)))
    return prior_term + ws.loga_sum(phi) + pair_term / phi + entropy


def update_tau(state: VariationalState, network, covariates, beta_eval, rho) -> np.ndarray:
    """One membership update; rows come back on the simplex."""
    ws = _Workspace(network, covariates, beta_eval, rho)
    return _tau_update(ws, state.tau, state.pi, state.beta0, state.phi)


def update_pi(tau) -> np.ndarray:
    """Community proportions: column means of the memberships."""
    tau = np.asarray(tau, dtype=float)
    return tau.mean(axis=0)


def update_beta0(tau, network, covariates, beta_eval, rho) -> BlockIntercepts:
    """Soft-weighted closed-form intercepts; errors on blocks without mass."""
    tau = np.asarray(tau, dtype=float)
    ws = _Workspace(network, covariates, beta_eval, rho)
    N1, N2, _ = _soft_block_stats(ws, tau)
    empty = N2 <= 0.0
    if empty.any():
        raise UndefinedBlockError(_first_bad_block(empty))
    bad = N1 <= 0.0
    if bad.any():
        raise AllZeroBlockError(_first_bad_block(bad))
    return BlockIntercepts(beta0=np.log(N1 / N2))


def update_phi(state: VariationalState, network, covariates, beta_eval, rho,
               bounds=_PHI_BOUNDS) -> float:
    """Dispersion update at the hard labels; warns if the optimum hits a bound."""
    ws = _Workspace(network, covariates, beta_eval, rho)
    phi, boundary, _ = _phi_update(ws, state.tau, state.beta0, bounds=bounds)
    if boundary:
        warnings.warn(
            f"dispersion estimate {phi:g} sits at the search boundary; "
            "the model may be badly misspecified",
            RuntimeWarning,
            stacklevel=2,
        )
    return phi


def elbo(state: VariationalState, network, covariates, beta_eval, rho) -> float:
    """Evidence lower bound of the current state."""
    ws = _Workspace(network, covariates, beta_eval, rho)
    return _elbo(ws, state.tau, state.pi, state.beta0, state.phi)


class _StartOutcome:
    __slots__ = ("state", "elbo", "iterations", "converged", "boundary", "trace", "error")

    def __init__(self, state=None, elbo=-np.inf, iterations=0, converged=False,
                 boundary=False, trace=None, error=None):
        self.state = state
        self.elbo = elbo
        self.iterations = iterations
        self.converged = converged
        self.boundary = boundary
        self.trace = trace if trace is not None else []
        self.error = error


def _initial_tau(n, K, rng):
    labels0 = rng.integers(0, K, size=n)
    if K == 1:
        return np.ones((n, 1))
    tau = np.full((n, K), 0.1 / (K - 1))
    tau[np.arange(n), labels0] = 0.9
    return tau


def _run_single_start(ws, config: FitConfig, rng) -> _StartOutcome:
    try:
        tau = _initial_tau(ws.n, config.K, rng)
        pi = tau.mean(axis=0)
        # Diagonal tilt breaks the label-permutation symmetry toward K
        # distinct communities; it only shapes the first membership solve,
        # since beta0 is refit from the data each iteration afterwards.
        beta0 = _beta0_update(ws, tau, np.zeros((config.K, config.K)))
        beta0 = beta0 + _INIT_DIAG_TILT * np.eye(config.K)
        phi = 1.0
        trace = []
        elbo_prev = -np.inf
        converged = False
        boundary = False
        iterations = 0
        for it in range(1, config.max_iters + 1):
            tau = _tau_solve(ws, tau, pi, beta0, phi)
            pi = tau.mean(axis=0)
            beta0 = _beta0_update(ws, tau, beta0)
            phi, boundary, _ = _phi_update(ws, tau, beta0, bounds=config.phi_bounds)
            value = _elbo(ws, tau, pi, beta0, phi)
            trace.append(value)
            iterations = it
            if abs(value - elbo_prev) < config.tol_elbo * (1.0 + abs(value)):
                converged = True
                break
            elbo_prev = value
        state = VariationalState(
            tau=tau, pi=pi, beta0=BlockIntercepts(beta0=beta0), phi=phi
        )
        return _StartOutcome(
            state=state,
            elbo=trace[-1],
            iterations=iterations,
            converged=converged,
            boundary=boundary,
            trace=trace,
        )
    except NumericalError as exc:
        return _StartOutcome(error=exc)


def _select_best(outcomes, rho, n_starts):
    elbos = np.array([o.elbo for o in outcomes])
    elbos = np.where(np.isnan(elbos), -np.inf, elbos)
    if not np.isfinite(elbos).any():
        first_error = next(o.error for o in outcomes if o.error is not None)
        raise FitError(
            f"all {n_starts} restarts failed at rho={rho:g}: {first_error}"
        )
    return int(np.argmax(elbos))


def fit_step2(network, covariates, beta_eval, rho, config: FitConfig,
              rng=None) -> VariationalState:
    """Variational inference at a fixed coefficient path and power parameter.

    Runs ``n_starts`` random initializations and returns the state with the
    highest final evidence lower bound; ties go to the earliest start.
    """
    ws = _Workspace(network, covariates, beta_eval, rho)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n_starts = config.resolve_n_starts(covariates.p, network.T)
    children = rng.spawn(n_starts)
    outcomes = [_run_single_start(ws, config, child) for child in children]
    best = _select_best(outcomes, float(rho), n_starts)
    return outcomes[best].state


def full_loglik(network, covariates, labels, beta0, beta_eval, pi, phi, rho) -> float:
    """Complete-data log-likelihood at hard labels.

    Sum of the label prior terms and the edge log-densities with
    log mu_ij(t) = beta0[c_i, c_j] + x_ij' beta(t).
    """
    iu, y_pairs, x_pairs = _pair_arrays(network, covariates)
    beta_eval = _check_beta_eval(beta_eval, network.T, covariates.p)
    B = beta0.beta0 if isinstance(beta0, BlockIntercepts) else np.asarray(beta0, dtype=float)
    idx = labels.as_index()
    base = B[idx[iu[0]], idx[iu[1]]]
    xb = beta_eval @ x_pairs if covariates.p else np.zeros_like(y_pairs)
    logmu = base[None, :] + xb
    edge = float(np.sum(tweedie_core.log_density_each(y_pairs, np.exp(logmu), phi, rho)))
    pi = np.asarray(pi, dtype=float)
    with np.errstate(divide="ignore"):
        prior = float(np.sum(np.log(pi)[idx]))
    return prior + edge


# ---------------------------------------------------------------------------
# Full two-step fit with rho selection
# ---------------------------------------------------------------------------


def _step1_for_rho(network, covariates, rho, config, basis):
    p = covariates.p
    T = network.T
    if p == 0:
        return None, np.zeros((T, 0))
    if T >= 4:
        lam = config.resolve_lambda(p)
        eta = estimate_beta_t(network, covariates, rho, lam, basis=basis)
        return eta, basis.B @ eta.eta
    return None, _estimate_beta_direct(network, covariates, rho)


def _reorder_communities(tau, pi, beta0):
    """Sort communities by descending proportion for stable reporting."""
    perm = np.argsort(-pi, kind="stable")
    return tau[:, perm], pi[perm], beta0[np.ix_(perm, perm)]


def fit(network, covariates, config: FitConfig, rng=None, threads=None) -> FitResult:
    """Two-step fit over the rho grid.

    Step 1 runs once per grid value; each (rho, restart) variational run is an
    independent task executed on up to ``threads`` workers and merged in a
    fixed order, so the result does not depend on the thread count. The grid
    value with the highest full log-likelihood at hard labels wins; errors are
    annotated with the grid value at which they occurred.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    grid = config.rho_grid
    p, T = covariates.p, network.T
    config.resolve_lambda(p)  # fail fast on a size mismatch
    n_starts = config.resolve_n_starts(p, T)
    rho_rngs = rng.spawn(len(grid))
    basis = spline_basis.build(network.grid) if (p >= 1 and T >= 4) else None

    step1 = []
    for rho in grid:
        try:
            step1.append(_step1_for_rho(network, covariates, rho, config, basis))
        except (NumericalError, DataError, ValueError) as exc:
            raise FitError(f"coefficient estimation failed at rho={rho:g}: {exc}") from exc

    workspaces = [
        _Workspace(network, covariates, beta_eval, rho)
        for rho, (_, beta_eval) in zip(grid, step1)
    ]
    start_rngs = [r.spawn(n_starts) for r in rho_rngs]
    tasks = [(gi, si) for gi in range(len(grid)) for si in range(n_starts)]

    def run(task):
        gi, si = task
        return _run_single_start(workspaces[gi], config, start_rngs[gi][si])

    if threads is not None and int(threads) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            flat = list(pool.map(run, tasks))
    else:
        flat = [run(task) for task in tasks]

    per_rho = {}
    best_by_rho = []
    for gi, rho in enumerate(grid):
        outcomes = flat[gi * n_starts : (gi + 1) * n_starts]
        best = _select_best(outcomes, rho, n_starts)
        chosen = outcomes[best]
        eta, beta_eval = step1[gi]
        loglik = full_loglik(
            network,
            covariates,
            chosen.state.hard_labels(),
            chosen.state.beta0,
            beta_eval,
            chosen.state.pi,
            chosen.state.phi,
            rho,
        )
        best_by_rho.append((chosen, loglik))
        per_rho[rho] = {
            "loglik": loglik,
            "elbo": chosen.elbo,
            "phi": chosen.state.phi,
            "iterations": chosen.iterations,
            "converged": chosen.converged,
            "phi_boundary": chosen.boundary,
            "n_failed_starts": sum(1 for o in outcomes if o.error is not None),
            "best_start": best,
            "start_elbos": [o.elbo for o in outcomes],
            "traces": [o.trace for o in outcomes],
        }

    logliks = np.array([ll for _, ll in best_by_rho])
    winner = int(np.argmax(logliks))
    rho_hat = grid[winner]
    chosen, loglik = best_by_rho[winner]
    eta_hat, beta_eval = step1[winner]
    tau, pi, beta0 = _reorder_communities(
        chosen.state.tau, chosen.state.pi, chosen.state.beta0.beta0
    )
    labels = CommunityLabels(labels=np.argmax(tau, axis=1) + 1, K=config.K)
    return FitResult(
        rho_hat=rho_hat,
        phi_hat=chosen.state.phi,
        beta0_hat=BlockIntercepts(beta0=beta0),
        eta_hat=eta_hat,
        beta_hat=beta_eval,
        tau_hat=tau,
        pi_hat=pi,
        labels_hat=labels,
        final_loglik=loglik,
        final_elbo=chosen.elbo,
        iterations=chosen.iterations,
        converged=chosen.converged,
        phi_boundary=chosen.boundary,
        grid=network.grid,
        per_rho=per_rho,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _fmt_row(values):
    return ",".join(_FMT % v for v in np.atleast_1d(values))


def write_fit_result(result: FitResult, path) -> None:
    """Write a fit result as a key-value header plus CSV blocks."""
    n, K = result.tau_hat.shape
    T = result.grid.T
    p = result.beta_hat.shape[1]
    lines = [
        "rho_hat = " + (_FMT % result.rho_hat),
        "phi_hat = " + (_FMT % result.phi_hat),
        "final_loglik = " + (_FMT % result.final_loglik),
        "final_elbo = " + (_FMT % result.final_elbo),
        f"iterations = {result.iterations}",
        f"converged = {'true' if result.converged else 'false'}",
        f"phi_boundary = {'true' if result.phi_boundary else 'false'}",
        f"n = {n}",
        f"K = {K}",
        f"T = {T}",
        f"p = {p}",
        "[beta0]",
    ]
    lines.extend(_fmt_row(row) for row in result.beta0_hat.beta0)
    lines.append("[pi]")
    lines.append(_fmt_row(result.pi_hat))
    lines.append("[tau]")
    lines.extend(_fmt_row(row) for row in result.tau_hat)
    lines.append("[labels]")
    lines.extend(
        f"{i + 1},{int(lab)}" for i, lab in enumerate(result.labels_hat.labels)
    )
    lines.append("[beta_t]")
    for nu in range(T):
        row = np.concatenate([[result.grid.points[nu]], result.beta_hat[nu]])
        lines.append(_fmt_row(row))
    if result.per_rho:
        lines.append("[rho_grid]")
        lines.append("rho,loglik,elbo,phi,iterations,converged,phi_boundary,n_failed_starts")
        for rho in sorted(result.per_rho):
            d = result.per_rho[rho]
            lines.append(
                ",".join(
                    [
                        _FMT % rho,
                        _FMT % d["loglik"],
                        _FMT % d["elbo"],
                        _FMT % d["phi"],
                        str(d["iterations"]),
                        "true" if d["converged"] else "false",
                        "true" if d["phi_boundary"] else "false",
                        str(d["n_failed_starts"]),
                    ]
                )
            )
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def read_fit_result(path) -> FitResult:
    """Read a file written by :func:`write_fit_result`."""
    header = {}
    sections = {}
    current = None
    with open(path, "r", encoding="utf-8") as handle:
        for raw in handle:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = []
            elif current is None:
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
            else:
                sections[current].append(line)
    try:
        n = int(header["n"])
        K = int(header["K"])
        T = int(header["T"])
        p = int(header["p"])
        beta0 = np.array([[float(v) for v in row.split(",")] for row in sections["beta0"]])
        pi = np.array([float(v) for v in sections["pi"][0].split(",")])
        tau = np.array([[float(v) for v in row.split(",")] for row in sections["tau"]])
        labels = np.array([int(row.split(",")[1]) for row in sections["labels"]])
        beta_rows = np.array(
            [[float(v) for v in row.split(",")] for row in sections["beta_t"]]
        )
        per_rho = {}
        if "rho_grid" in sections:
            for row in sections["rho_grid"][1:]:
                cells = row.split(",")
                per_rho[float(cells[0])] = {
                    "loglik": float(cells[1]),
                    "elbo": float(cells[2]),
                    "phi": float(cells[3]),
                    "iterations": int(cells[4]),
                    "converged": cells[5] == "true",
                    "phi_boundary": cells[6] == "true",
                    "n_failed_starts": int(cells[7]),
                }
        if tau.shape != (n, K) or beta_rows.shape != (T, p + 1):
            raise ValueError("block shapes disagree with the header")
        return FitResult(
            rho_hat=float(header["rho_hat"]),
            phi_hat=float(header["phi_hat"]),
            beta0_hat=BlockIntercepts(beta0=beta0),
            eta_hat=None,
            beta_hat=beta_rows[:, 1:],
            tau_hat=tau,
            pi_hat=pi,
            labels_hat=CommunityLabels(labels=labels, K=K),
            final_loglik=float(header["final_loglik"]),
            final_elbo=float(header["final_elbo"]),
            iterations=int(header["iterations"]),
            converged=header["converged"] == "true",
            phi_boundary=header["phi_boundary"] == "true",
            grid=TimeGrid(points=beta_rows[:, 0]),
            per_rho=per_rho,
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed fit-result file: {exc}") from exc
