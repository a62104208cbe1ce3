"""Dynamic weighted networks with pairwise covariates: types, IO, generation.

All matrices are symmetric with a structurally zero diagonal (no self-loops).
CSV writers use 17 significant digits so files round-trip doubles exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tweedie_core
from ._errors import DataError

__all__ = [
    "TimeGrid",
    "DynamicNetwork",
    "CovariateSet",
    "CommunityLabels",
    "SimulationConfig",
    "BETA_FORMS",
    "uniform_grid",
    "resolve_beta_form",
    "evaluate_beta_forms",
    "sample_labels",
    "validate_and_symmetrize",
    "preprocess_trade",
    "generate",
    "load_csv",
    "load_network",
    "load_covariates",
    "read_labels",
    "read_beta_grid",
    "write_network",
    "write_covariates",
    "write_labels",
    "write_beta_grid",
    "write_matrix_csv",
]

_FMT = "%.17g"


def _lock(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing observation times inside [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 1:
            raise ValueError("time grid must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(pts)):
            raise ValueError("time grid contains non-finite values")
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise ValueError("time points must lie in [0, 1]")
        if pts.size > 1 and not np.all(np.diff(pts) > 0.0):
            raise ValueError("time points must be strictly increasing")
        object.__setattr__(self, "points", _lock(pts))

    @property
    def T(self) -> int:
        return self.points.size


def uniform_grid(T: int) -> TimeGrid:
    """T equally spaced points on [0, 1]; a single point sits at 0."""
    if T < 1:
        raise ValueError("T must be at least 1")
    return TimeGrid(np.linspace(0.0, 1.0, T))


@dataclass(frozen=True, eq=False)
class DynamicNetwork:
    """Edge-weight matrices observed on a time grid.

    ``Y`` has shape (T, n, n); every slice is symmetric and non-negative with
    a zero diagonal.
    """

    grid: TimeGrid
    Y: np.ndarray

    def __post_init__(self):
        Y = np.array(self.Y, dtype=float)
        if Y.ndim != 3 or Y.shape[1] != Y.shape[2]:
            raise ValueError(f"Y must have shape (T, n, n), got {Y.shape}")
        if Y.shape[0] != self.grid.T:
            raise ValueError(
                f"Y has {Y.shape[0]} time slices but the grid has {self.grid.T} points"
            )
        if not np.all(np.isfinite(Y)):
            raise ValueError("edge weights contain non-finite values")
        if Y.size and Y.min() < 0.0:
            raise ValueError("edge weights must be non-negative")
        for nu in range(Y.shape[0]):
            if not np.array_equal(Y[nu], Y[nu].T):
                raise ValueError(f"edge-weight matrix at time index {nu} is not symmetric")
        if np.any(Y.diagonal(axis1=1, axis2=2) != 0.0):
            raise ValueError("edge-weight matrices must have zero diagonals")
        object.__setattr__(self, "Y", _lock(Y))

    @property
    def n(self) -> int:
        return self.Y.shape[1]

    @property
    def T(self) -> int:
        return self.Y.shape[0]


@dataclass(frozen=True, eq=False)
class CovariateSet:
    """p symmetric pairwise covariate matrices with zero diagonals."""

    X: np.ndarray
    n: int = -1

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 3 or (X.shape[0] > 0 and X.shape[1] != X.shape[2]):
            raise ValueError(f"X must have shape (p, n, n), got {X.shape}")
        n = self.n
        if X.shape[0] > 0:
            if n >= 0 and n != X.shape[1]:
                raise ValueError(f"declared n={n} does not match covariate shape {X.shape}")
            n = X.shape[1]
        elif n < 0:
            raise ValueError("an empty covariate set needs an explicit node count")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates contain non-finite values")
        for u in range(X.shape[0]):
            if not np.array_equal(X[u], X[u].T):
                raise ValueError(f"covariate {u + 1} is not symmetric")
            if np.any(np.diagonal(X[u]) != 0.0):
                raise ValueError(f"covariate {u + 1} has a nonzero diagonal")
        object.__setattr__(self, "X", _lock(X.reshape(X.shape[0], n, n)))
        object.__setattr__(self, "n", n)

    @property
    def p(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True, eq=False)
class CommunityLabels:
    """1-based community labels for n nodes, values in {1, ..., K}."""

    labels: np.ndarray
    K: int

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.ndim != 1 or labels.size < 1:
            raise ValueError("labels must be a non-empty 1-D sequence")
        if not np.issubdtype(labels.dtype, np.integer):
            as_int = labels.astype(int)
            if not np.array_equal(as_int, labels):
                raise ValueError("labels must be integers")
            labels = as_int
        labels = labels.astype(np.int64)
        if int(self.K) < 1:
            raise ValueError("K must be at least 1")
        if labels.min() < 1 or labels.max() > int(self.K):
            raise ValueError(f"labels must lie in 1..{self.K}")
        object.__setattr__(self, "labels", _lock(labels))
        object.__setattr__(self, "K", int(self.K))

    @property
    def n(self) -> int:
        return self.labels.size

    def as_index(self) -> np.ndarray:
        """Zero-based label array."""
        return self.labels - 1

    def one_hot(self) -> np.ndarray:
        """n x K indicator matrix."""
        out = np.zeros((self.n, self.K))
        out[np.arange(self.n), self.labels - 1] = 1.0
        return out


# Time-varying coefficient shapes used by the synthetic generator, keyed by
# a compact formula string; "const:<v>" gives a constant and "zero" is 0.
BETA_FORMS = {
    "2t-1": lambda t: 2.0 * t - 1.0,
    "sin2pit": lambda t: np.sin(2.0 * np.pi * t),
    "2t": lambda t: 2.0 * t,
    "sin2pit+1": lambda t: np.sin(2.0 * np.pi * t) + 1.0,
    "0.5(2t-1)": lambda t: 0.5 * (2.0 * t - 1.0),
    "0.5sin2pit": lambda t: 0.5 * np.sin(2.0 * np.pi * t),
}


def resolve_beta_form(spec: str):
    """Map a coefficient-form string to a vectorized callable of time."""
    spec = spec.strip()
    if spec in BETA_FORMS:
        return BETA_FORMS[spec]
    if spec == "zero":
        return lambda t: np.zeros_like(np.asarray(t, dtype=float))
    if spec.startswith("const:"):
        try:
            value = float(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ValueError(f"bad constant coefficient form {spec!r}") from exc
        return lambda t, v=value: np.full_like(np.asarray(t, dtype=float), v)
    raise ValueError(
        f"unknown coefficient form {spec!r}; known forms: "
        f"{sorted(BETA_FORMS)} plus 'zero' and 'const:<value>'"
    )


def evaluate_beta_forms(forms, grid: TimeGrid) -> np.ndarray:
    """Evaluate coefficient forms on the grid, returning a T x p matrix."""
    cols = [resolve_beta_form(f)(grid.points) for f in forms]
    if not cols:
        return np.zeros((grid.T, 0))
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class SimulationConfig:
    """Everything the synthetic generator needs.

    ``beta0_diag`` fills the within-community intercepts and
    ``beta0_offdiag`` the rest. ``beta_forms`` must name one coefficient
    shape per covariate; ``covariate_law`` is "uniform" for Uniform(-1, 1)
    or "normal" for the standard normal.
    """

    n: int
    K: int
    pi: np.ndarray
    beta0_diag: float
    beta0_offdiag: float
    phi: float
    rho: float
    p: int = 0
    covariate_law: str = "uniform"
    beta_forms: tuple = ()
    grid: TimeGrid | None = None
    T: int = 1
    seed: int | None = None

    def __post_init__(self):
        if int(self.n) < 2:
            raise ValueError("n must be at least 2")
        if int(self.K) < 1:
            raise ValueError("K must be at least 1")
        pi = np.array(self.pi, dtype=float)
        if pi.shape != (int(self.K),):
            raise ValueError(f"pi must have length K={self.K}")
        if pi.min() < 0.0 or not math.isclose(pi.sum(), 1.0, abs_tol=1e-8):
            raise ValueError("pi must be non-negative and sum to 1")
        object.__setattr__(self, "pi", _lock(pi / pi.sum()))
        if not float(self.phi) > 0.0:
            raise ValueError("phi must be strictly positive")
        if not 1.0 < float(self.rho) < 2.0:
            raise ValueError("rho must lie strictly inside (1, 2)")
        if self.covariate_law not in ("uniform", "normal"):
            raise ValueError("covariate_law must be 'uniform' or 'normal'")
        if int(self.p) < 0:
            raise ValueError("p must be non-negative")
        forms = tuple(self.beta_forms)
        if int(self.p) != len(forms):
            raise ValueError(f"p={self.p} covariates need exactly {self.p} coefficient forms")
        for f in forms:
            resolve_beta_form(f)  # fail fast on typos
        object.__setattr__(self, "beta_forms", forms)
        grid = self.grid if self.grid is not None else uniform_grid(int(self.T))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "T", grid.T)

    def beta0_matrix(self) -> np.ndarray:
        out = np.full((self.K, self.K), float(self.beta0_offdiag))
        np.fill_diagonal(out, float(self.beta0_diag))
        return out


def sample_labels(n: int, pi, rng: np.random.Generator) -> CommunityLabels:
    """Draw n i.i.d. 1-based labels from the community prior."""
    pi = np.asarray(pi, dtype=float)
    labels = rng.choice(pi.size, size=n, p=pi / pi.sum()) + 1
    return CommunityLabels(labels=labels, K=pi.size)


def validate_and_symmetrize(raw, grid: TimeGrid | None = None) -> DynamicNetwork:
    """Average each matrix with its transpose, zero the diagonal, validate.

    ``raw`` is a sequence of square matrices (or a (T, n, n) array); entries
    must be non-negative after averaging. Already-symmetric input with a zero
    diagonal comes back unchanged, so the operation is idempotent.
    """
    mats = [np.asarray(M, dtype=float) for M in raw]
    if not mats:
        raise DataError("no edge-weight matrices supplied")
    for nu, M in enumerate(mats):
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DataError(f"matrix at time index {nu} is not square: shape {M.shape}")
        if M.shape != mats[0].shape:
            raise DataError(
                f"matrix at time index {nu} has shape {M.shape}, expected {mats[0].shape}"
            )
        if not np.all(np.isfinite(M)):
            raise DataError(f"matrix at time index {nu} contains non-finite values")
    out = np.stack([(M + M.T) / 2.0 for M in mats])
    for nu in range(out.shape[0]):
        np.fill_diagonal(out[nu], 0.0)
    if out.size and out.min() < 0.0:
        nu, i, j = np.unravel_index(np.argmin(out), out.shape)
        raise DataError(
            f"negative averaged weight at time index {nu}, entry ({i + 1}, {j + 1}): "
            f"{out[nu, i, j]}"
        )
    if grid is None:
        grid = uniform_grid(out.shape[0])
    return DynamicNetwork(grid=grid, Y=out)


def preprocess_trade(network: DynamicNetwork, threshold: float = 1.0) -> DynamicNetwork:
    """Zero every weight at or below the threshold, log-transform the rest.

    Requires ``threshold >= 1`` so the surviving logs are positive.
    """
    if not float(threshold) >= 1.0:
        raise ValueError("threshold must be at least 1 so log-transformed weights stay positive")
    Y = network.Y
    out = np.where(Y > threshold, np.log(np.where(Y > threshold, Y, 1.0)), 0.0)
    return DynamicNetwork(grid=network.grid, Y=out)


def generate(
    config: SimulationConfig, rng: np.random.Generator | None = None
) -> tuple[DynamicNetwork, CovariateSet, CommunityLabels]:
    """Draw a synthetic network: labels, covariates, then edge weights.

    Labels are i.i.d. from ``config.pi``; each unordered pair gets one
    covariate draw per covariate (mirrored, zero diagonal); edge weights are
    compound Poisson-Gamma draws with
    ``log mu_ij(t) = beta0[c_i, c_j] + x_ij' beta(t)``.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n, K, p = config.n, config.K, config.p
    grid = config.grid
    labels = sample_labels(n, config.pi, rng)

    iu = np.triu_indices(n, k=1)
    m = iu[0].size
    X = np.zeros((p, n, n))
    for u in range(p):
        if config.covariate_law == "uniform":
            vals = rng.uniform(-1.0, 1.0, size=m)
        else:
            vals = rng.standard_normal(m)
        X[u][iu] = vals
        X[u] += X[u].T
    covariates = CovariateSet(X=X, n=n)

    beta_eval = evaluate_beta_forms(config.beta_forms, grid)
    beta0 = config.beta0_matrix()
    idx = labels.as_index()
    base = beta0[np.ix_(idx, idx)][iu]
    xb_pairs = np.tensordot(beta_eval, X, axes=([1], [0]))[(slice(None),) + iu] if p else np.zeros(
        (grid.T, m)
    )

    Y = np.zeros((grid.T, n, n))
    for nu in range(grid.T):
        mu = np.exp(base + xb_pairs[nu])
        draws = tweedie_core.sample_each(mu, config.phi, config.rho, rng)
        Y[nu][iu] = draws
        Y[nu] += Y[nu].T
    network = DynamicNetwork(grid=grid, Y=Y)
    return network, covariates, labels


# ---------------------------------------------------------------------------
# CSV formats: matrices are n rows x n columns, plain decimal, no header.
# A network manifest lists "time,path" rows in increasing time order; paths
# are relative to the manifest's directory. A labels file has "node,label"
# rows with 1-based node indices. A coefficient grid file has "t,b1,...,bp"
# rows.
# ---------------------------------------------------------------------------


def write_matrix_csv(path, M: np.ndarray) -> None:
    np.savetxt(path, np.asarray(M, dtype=float), fmt=_FMT, delimiter=",")


def _read_matrix_csv(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as handle:
        for i, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(
                    f"{path}: row {i + 1} has {len(cells)} columns, expected {width}"
                )
            parsed = []
            for j, cell in enumerate(cells):
                try:
                    value = float(cell)
                except ValueError as exc:
                    raise DataError(
                        f"{path}: unparseable value {cell.strip()!r} at row {i + 1}, "
                        f"column {j + 1}"
                    ) from exc
                if not math.isfinite(value):
                    raise DataError(
                        f"{path}: non-finite value {cell.strip()!r} at row {i + 1}, "
                        f"column {j + 1}"
                    )
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: empty matrix file")
    return np.array(rows)


def write_network(network: DynamicNetwork, out_dir, prefix: str = "y") -> str:
    """Write one CSV per time point plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for nu in range(network.T):
        name = f"{prefix}_{nu:03d}.csv"
        write_matrix_csv(os.path.join(out_dir, name), network.Y[nu])
        lines.append((_FMT % network.grid.points[nu]) + "," + name)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    return manifest


def load_network(manifest_path) -> DynamicNetwork:
    """Read a manifest and its per-time matrices; symmetrize and validate."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    times, paths = [], []
    try:
        handle = open(manifest_path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open manifest {manifest_path}: {exc}") from exc
    with handle:
        for i, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",", 1)
            if len(cells) != 2:
                raise DataError(f"{manifest_path}: row {i + 1} is not 'time,path'")
            try:
                t = float(cells[0])
            except ValueError as exc:
                raise DataError(
                    f"{manifest_path}: unparseable time {cells[0]!r} at row {i + 1}"
                ) from exc
            times.append(t)
            paths.append(os.path.join(base, cells[1].strip()))
    if not times:
        raise DataError(f"{manifest_path}: empty manifest")
    mats = []
    for t, p_ in zip(times, paths):
        if not os.path.exists(p_):
            raise DataError(f"manifest entry {p_} does not exist")
        mats.append(_read_matrix_csv(p_))
    try:
        grid = TimeGrid(np.array(times))
    except ValueError as exc:
        raise DataError(f"{manifest_path}: bad time grid: {exc}") from exc
    try:
        return validate_and_symmetrize(mats, grid=grid)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def write_covariates(covariates: CovariateSet, out_dir, prefix: str = "x") -> list:
    """Write one CSV per covariate; returns the paths in covariate order."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for u in range(covariates.p):
        path = os.path.join(out_dir, f"{prefix}_{u + 1}.csv")
        write_matrix_csv(path, covariates.X[u])
        paths.append(path)
    return paths


def load_covariates(paths, n: int | None = None) -> CovariateSet:
    """Read covariate CSVs; each must be symmetric with a zero diagonal."""
    mats = [_read_matrix_csv(p) for p in paths]
    for path, M in zip(paths, mats):
        if M.shape[0] != M.shape[1]:
            raise DataError(f"{path}: covariate matrix is not square: {M.shape}")
        if not np.array_equal(M, M.T):
            raise DataError(f"{path}: covariate matrix is not symmetric")
        if np.any(np.diagonal(M) != 0.0):
            raise DataError(f"{path}: covariate matrix has a nonzero diagonal")
    if mats:
        try:
            return CovariateSet(X=np.stack(mats))
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    if n is None:
        raise DataError("an empty covariate list needs an explicit node count")
    return CovariateSet(X=np.zeros((0, n, n)), n=n)


def load_csv(manifest_path, covariate_paths=()) -> tuple[DynamicNetwork, CovariateSet]:
    """Load a network manifest plus covariate files, enforcing a shared n."""
    network = load_network(manifest_path)
    covariates = load_covariates(covariate_paths, n=network.n)
    if covariates.n != network.n:
        raise DataError(
            f"covariates are for {covariates.n} nodes but the network has {network.n}"
        )
    return network, covariates


def write_labels(labels: CommunityLabels, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for i, lab in enumerate(labels.labels, start=1):
            handle.write(f"{i},{int(lab)}\n")


def read_labels(path) -> CommunityLabels:
    entries = {}
    with open(path, "r", encoding="utf-8") as handle:
        for i, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 2:
                raise DataError(f"{path}: row {i + 1} is not 'node,label'")
            try:
                node, lab = int(cells[0]), int(cells[1])
            except ValueError as exc:
                raise DataError(f"{path}: unparseable row {i + 1}") from exc
            entries[node] = lab
    if not entries:
        raise DataError(f"{path}: empty labels file")
    n = max(entries)
    if sorted(entries) != list(range(1, n + 1)):
        raise DataError(f"{path}: node indices must cover 1..{n} exactly once")
    labels = np.array([entries[i] for i in range(1, n + 1)])
    if labels.min() < 1:
        raise DataError(f"{path}: labels must be positive integers")
    return CommunityLabels(labels=labels, K=int(labels.max()))


def write_beta_grid(path, grid: TimeGrid, beta_eval: np.ndarray) -> None:
    beta_eval = np.asarray(beta_eval, dtype=float)
    with open(path, "w", encoding="utf-8") as handle:
        for nu in range(grid.T):
            cells = [_FMT % grid.points[nu]] + [_FMT % v for v in beta_eval[nu]]
            handle.write(",".join(cells) + "\n")


def read_beta_grid(path) -> tuple[TimeGrid, np.ndarray]:
    M = _read_matrix_csv(path)
    if M.ndim != 2 or M.shape[1] < 1:
        raise DataError(f"{path}: expected rows of 't,b1,...,bp'")
    try:
        grid = TimeGrid(M[:, 0])
    except ValueError as exc:
        raise DataError(f"{path}: bad time column: {exc}") from exc
    return grid, M[:, 1:]
