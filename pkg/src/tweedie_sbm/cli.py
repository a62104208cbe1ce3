"""Batch command line driver.

Five subcommands cover the simulate / estimate / score loop:

``simulate``
    draw a synthetic weighted network and write it out as CSV files,
``fit``
    run the two-step estimator on a network manifest,
``cv``
    pick the roughness penalty by leave-one-time-out cross-validation and
    refit on the full data at the winner,
``eval``
    score estimates against ground truth,
``density``
    print log-density values for explicit (y, mu, phi, rho) tuples.

Settings come from three layers: built-in defaults, then a flat
``key = value`` config file (``#`` starts a comment), then explicit command
line flags. Unknown config keys are rejected. Each run writes its merged
settings to ``config.resolved`` in the output directory, next to the result
files and a ``log.txt`` with the per-iteration objective trace. Inputs are
validated and the whole computation finishes before anything is written, so
a failed run never leaves a half-written output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. A failure prints a one-line JSON record to stderr naming the stage
(config, load, compute, write) that failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from types import SimpleNamespace

import numpy as np

from . import estimation, evaluation, model_selection, network_data, tweedie_core
from ._errors import ConfigError, DataError, NumericalError, TweedieSbmError

_FMT = "%.17g"

# intercept presets: (within-community, between-community) values
_SCENARIOS = {
    1: (1.0, 0.0),
    2: (0.5, -0.5),
    3: (0.0, -1.0),
    4: (0.5, 0.0),
    5: (0.25, -0.25),
    6: (0.0, -0.5),
}


# ---------------------------------------------------------------------------
# Option schema and value coercion
# ---------------------------------------------------------------------------


def _as_int(key, text):
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {text!r}") from None


def _as_float(key, text):
    try:
        return float(str(text).strip())
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {text!r}") from None


def _as_floats(key, text):
    parts = [part for part in str(text).split(",") if part.strip()]
    if not parts:
        raise ConfigError(f"{key} must be a comma-separated list of numbers")
    return tuple(_as_float(key, part) for part in parts)


def _as_str(key, text):
    value = str(text).strip()
    if not value:
        raise ConfigError(f"{key} must not be empty")
    return value


@dataclasses.dataclass(frozen=True)
class _Opt:
    """One documented setting: how to parse it and what it defaults to."""

    coerce: object
    default: object = None
    multi: bool = False
    help: str = ""


_COMMON = {
    "out": _Opt(_as_str, help="output directory for this run"),
    "seed": _Opt(_as_int, 0, help="root random seed"),
    "threads": _Opt(_as_int, help="worker threads (default: machine parallelism)"),
}

_SIMULATE = {
    **_COMMON,
    "n": _Opt(_as_int, help="number of nodes"),
    "K": _Opt(_as_int, 3, help="number of communities"),
    "pi": _Opt(_as_floats, help="community prior (default 0.2,0.3,0.5 for K=3, else uniform)"),
    "scenario": _Opt(_as_int, 1, help="intercept preset, 1 through 6"),
    "beta0_diag": _Opt(_as_float, help="override the within-community intercept"),
    "beta0_offdiag": _Opt(_as_float, help="override the between-community intercept"),
    "phi": _Opt(_as_float, 1.0, help="dispersion parameter"),
    "rho": _Opt(_as_float, 1.5, help="power parameter in (1, 2)"),
    "p": _Opt(_as_int, 0, help="number of pairwise covariates"),
    "covariate_law": _Opt(_as_str, "uniform", help="covariate draw: uniform or normal"),
    "beta_t": _Opt(_as_str, (), multi=True, help="coefficient form, once per covariate"),
    "T": _Opt(_as_int, 1, help="number of time points"),
}

_FIT = {
    **_COMMON,
    "manifest": _Opt(_as_str, help="network manifest with time,path rows"),
    "covariate": _Opt(_as_str, (), multi=True, help="covariate matrix CSV, repeatable"),
    "K": _Opt(_as_int, help="number of communities"),
    "rho_grid": _Opt(_as_floats, help="candidate power parameters"),
    "lam": _Opt(_as_floats, help="roughness penalty, scalar or one value per covariate"),
    "n_starts": _Opt(_as_int, help="random restarts per candidate"),
    "max_iters": _Opt(_as_int, help="iteration cap per restart"),
    "tol_elbo": _Opt(_as_float, help="relative objective change declaring convergence"),
}

_CV = {key: opt for key, opt in _FIT.items() if key != "lam"}
_CV["lambda_grid"] = _Opt(_as_floats, help="candidate penalties")

_EVAL = {
    **_COMMON,
    "est_labels": _Opt(_as_str, help="estimated community labels CSV"),
    "true_labels": _Opt(_as_str, help="true community labels CSV"),
    "est_beta": _Opt(_as_str, help="estimated coefficient grid CSV"),
    "true_beta": _Opt(_as_str, help="true coefficient grid CSV"),
    "fit_result": _Opt(_as_str, (), multi=True,
                       help="fit result file, run directory, or directory of runs; repeatable"),
    "true_phi": _Opt(_as_float, help="true dispersion, for bias tables"),
    "true_rho": _Opt(_as_float, help="true power parameter, for bias tables"),
}

_DENSITY = {
    "tuple": _Opt(_as_str, (), multi=True, help="y,mu,phi,rho values, repeatable"),
}


def _read_config_file(path, options) -> dict:
    """Parse a flat key = value file against the documented keys."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for i, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        key, eq, value = text.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(f"{path}:{i}: expected 'key = value', got {raw.strip()!r}")
        if key not in options:
            known = ", ".join(sorted(options))
            raise ConfigError(f"{path}:{i}: unknown key {key!r}; known keys: {known}")
        if options[key].multi:
            out.setdefault(key, []).append(value)
        elif key in out:
            raise ConfigError(f"{path}:{i}: duplicate key {key!r}")
        else:
            out[key] = value
    return out


def _resolve(options, args) -> dict:
    """Merge defaults, config file values, and explicit flags, in that order."""
    resolved = {key: opt.default for key, opt in options.items()}
    if getattr(args, "config", None) is not None:
        for key, value in _read_config_file(args.config, options).items():
            opt = options[key]
            if opt.multi:
                resolved[key] = tuple(opt.coerce(key, v) for v in value)
            else:
                resolved[key] = opt.coerce(key, value)
    for key, opt in options.items():
        value = getattr(args, key)
        if value is None:
            continue
        if opt.multi:
            resolved[key] = tuple(opt.coerce(key, v) for v in value)
        else:
            resolved[key] = opt.coerce(key, value)
    return resolved


def _require(cfg, *keys):
    for key in keys:
        if cfg.get(key) is None:
            flag = "--" + key.replace("_", "-")
            raise ConfigError(f"{key} is required (flag {flag} or config key {key})")


def _require_file(key, path):
    if not os.path.isfile(path):
        raise ConfigError(f"{key} file not found: {path}")


def _threads(cfg) -> int:
    value = cfg.get("threads")
    if value is None:
        return os.cpu_count() or 1
    if value < 1:
        raise ConfigError(f"threads must be at least 1, got {value}")
    return value


def _check_seed(cfg):
    if cfg.get("seed") is not None and cfg["seed"] < 0:
        raise ConfigError(f"seed must be non-negative, got {cfg['seed']}")


# ---------------------------------------------------------------------------
# Output directory writers. All writes go through here, after the
# computation has finished, so results land in one deterministic pass.
# ---------------------------------------------------------------------------


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return _FMT % value
    if isinstance(value, (tuple, list, np.ndarray)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _write_resolved(out_dir, command, cfg):
    lines = [f"command = {command}"]
    for key in sorted(cfg):
        value = cfg[key]
        if value is None or (isinstance(value, (tuple, list)) and not value):
            continue
        lines.append(f"{key} = {_format_value(value)}")
    _write_text(os.path.join(out_dir, "config.resolved"), lines)


def _write_inputs(out_dir, entries):
    _write_text(
        os.path.join(out_dir, "inputs.txt"),
        [f"{name} = {path}" for name, path in entries],
    )


def _write_log(out_dir, lines):
    _write_text(os.path.join(out_dir, "log.txt"), lines)


def _write_text(path, lines):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def _fit_log_lines(result) -> list:
    """Objective traces for every candidate and restart, then the winner."""
    lines = []
    for rho, info in result.per_rho.items():
        for si, trace in enumerate(info["traces"]):
            for it, value in enumerate(trace):
                lines.append(
                    "rho=" + (_FMT % rho) + f" start={si} iter={it} "
                    "elbo=" + (_FMT % value)
                )
        lines.append(
            "rho=" + (_FMT % rho) + " loglik=" + (_FMT % info["loglik"])
            + f" best_start={info['best_start']}"
            + f" failed_starts={info['n_failed_starts']}"
        )
    lines.append(
        "selected rho=" + (_FMT % result.rho_hat)
        + " loglik=" + (_FMT % result.final_loglik)
        + " elbo=" + (_FMT % result.final_elbo)
        + f" iterations={result.iterations}"
        + f" converged={'yes' if result.converged else 'no'}"
    )
    return lines


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg, stage):
    _require(cfg, "out", "n")
    _check_seed(cfg)
    scenario = cfg["scenario"]
    if scenario not in _SCENARIOS:
        raise ConfigError(f"scenario must be one of {sorted(_SCENARIOS)}, got {scenario}")
    diag, offdiag = _SCENARIOS[scenario]
    if cfg["beta0_diag"] is not None:
        diag = cfg["beta0_diag"]
    if cfg["beta0_offdiag"] is not None:
        offdiag = cfg["beta0_offdiag"]
    K = cfg["K"]
    pi = cfg["pi"]
    if pi is None:
        pi = (0.2, 0.3, 0.5) if K == 3 else tuple([1.0 / K] * K)
    try:
        sim = network_data.SimulationConfig(
            n=cfg["n"],
            K=K,
            pi=np.asarray(pi, dtype=float),
            beta0_diag=diag,
            beta0_offdiag=offdiag,
            phi=cfg["phi"],
            rho=cfg["rho"],
            p=cfg["p"],
            covariate_law=cfg["covariate_law"],
            beta_forms=cfg["beta_t"],
            T=cfg["T"],
            seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    stage.stage = "compute"
    network, covariates, labels = network_data.generate(sim)

    stage.stage = "write"
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    effective = {
        **cfg,
        "pi": tuple(float(v) for v in sim.pi),
        "beta0_diag": diag,
        "beta0_offdiag": offdiag,
    }
    _write_resolved(out, "simulate", effective)
    network_data.write_network(network, out)
    if sim.p:
        network_data.write_covariates(covariates, out)
        beta_true = network_data.evaluate_beta_forms(sim.beta_forms, sim.grid)
        network_data.write_beta_grid(os.path.join(out, "beta_true.csv"), sim.grid, beta_true)
    network_data.write_labels(labels, os.path.join(out, "labels_true.csv"))
    counts = np.bincount(labels.as_index(), minlength=K)
    _write_log(out, [
        f"simulate n={sim.n} K={sim.K} T={sim.T} p={sim.p} seed={cfg['seed']}",
        "community sizes " + ",".join(str(int(c)) for c in counts),
        "total weight " + (_FMT % float(network.Y.sum())),
    ])


def _fit_config_from(cfg) -> estimation.FitConfig:
    kwargs = {"K": cfg["K"], "seed": cfg["seed"]}
    if cfg["rho_grid"] is not None:
        kwargs["rho_grid"] = cfg["rho_grid"]
    if cfg.get("lam") is not None:
        kwargs["lambda_vec"] = cfg["lam"]
    for key in ("n_starts", "max_iters", "tol_elbo"):
        if cfg[key] is not None:
            kwargs[key] = cfg[key]
    try:
        return estimation.FitConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_inputs(cfg):
    try:
        return network_data.load_csv(cfg["manifest"], cfg["covariate"])
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _check_fit_inputs(cfg):
    _check_seed(cfg)
    _require_file("manifest", cfg["manifest"])
    for path in cfg["covariate"]:
        _require_file("covariate", path)


def cmd_fit(cfg, stage):
    _require(cfg, "out", "manifest", "K")
    fit_config = _fit_config_from(cfg)
    threads = _threads(cfg)
    _check_fit_inputs(cfg)

    stage.stage = "load"
    network, covariates = _load_inputs(cfg)

    stage.stage = "compute"
    result = estimation.fit(network, covariates, fit_config, threads=threads)

    stage.stage = "write"
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    effective = {
        **cfg,
        "rho_grid": fit_config.rho_grid,
        "lam": fit_config.lambda_vec,
        "max_iters": fit_config.max_iters,
        "tol_elbo": fit_config.tol_elbo,
    }
    _write_resolved(out, "fit", effective)
    _write_inputs(out, _input_entries(cfg))
    estimation.write_fit_result(result, os.path.join(out, "fit_result.txt"))
    network_data.write_labels(result.labels_hat, os.path.join(out, "labels_hat.csv"))
    network_data.write_beta_grid(os.path.join(out, "beta_hat.csv"), result.grid, result.beta_hat)
    _write_log(out, _fit_log_lines(result))


def _input_entries(cfg):
    entries = [("manifest", cfg["manifest"])]
    entries.extend(
        (f"covariate_{u + 1}", path) for u, path in enumerate(cfg["covariate"])
    )
    return entries


def cmd_cv(cfg, stage):
    _require(cfg, "out", "manifest", "K")
    fit_config = _fit_config_from(cfg)
    threads = _threads(cfg)
    if cfg["lambda_grid"] is not None and min(cfg["lambda_grid"]) < 0.0:
        raise ConfigError("lambda_grid values must be non-negative")
    _check_fit_inputs(cfg)

    stage.stage = "load"
    network, covariates = _load_inputs(cfg)

    stage.stage = "compute"
    report = model_selection.cross_validate(
        network, covariates, fit_config,
        lambda_grid=cfg["lambda_grid"], threads=threads,
    )
    refit_config = dataclasses.replace(fit_config, lambda_vec=(report.lambda_star,))
    refit = estimation.fit(network, covariates, refit_config, threads=threads)

    stage.stage = "write"
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    effective = {
        **cfg,
        "rho_grid": fit_config.rho_grid,
        "lambda_grid": report.lambda_grid,
        "max_iters": fit_config.max_iters,
        "tol_elbo": fit_config.tol_elbo,
    }
    _write_resolved(out, "cv", effective)
    _write_inputs(out, _input_entries(cfg))
    model_selection.write_cv_report(report, os.path.join(out, "cv_report.csv"))
    estimation.write_fit_result(refit, os.path.join(out, "fit_result.txt"))
    network_data.write_labels(refit.labels_hat, os.path.join(out, "labels_hat.csv"))
    network_data.write_beta_grid(os.path.join(out, "beta_hat.csv"), refit.grid, refit.beta_hat)
    lines = []
    for li, lam in enumerate(report.lambda_grid):
        for fi, t in enumerate(report.fold_times):
            lines.append(
                "lambda=" + (_FMT % lam) + f" fold={fi + 1} "
                "time=" + (_FMT % t) + " loss=" + (_FMT % report.losses[li, fi])
            )
    lines.append("lambda_star=" + (_FMT % report.lambda_star))
    lines.extend(_fit_log_lines(refit))
    _write_log(out, lines)


def _expand_fit_results(entries):
    """Accept a result file, a run directory, or a directory of run directories."""
    paths = []
    for entry in entries:
        if os.path.isdir(entry):
            direct = os.path.join(entry, "fit_result.txt")
            if os.path.isfile(direct):
                paths.append(direct)
                continue
            found = sorted(
                os.path.join(entry, name, "fit_result.txt")
                for name in os.listdir(entry)
                if os.path.isfile(os.path.join(entry, name, "fit_result.txt"))
            )
            if not found:
                raise ConfigError(f"no fit_result.txt under directory {entry}")
            paths.extend(found)
        elif os.path.isfile(entry):
            paths.append(entry)
        else:
            raise ConfigError(f"fit_result not found: {entry}")
    return paths


def cmd_eval(cfg, stage):
    _require(cfg, "out")
    have_labels = cfg["est_labels"] is not None or cfg["true_labels"] is not None
    if have_labels and (cfg["est_labels"] is None or cfg["true_labels"] is None):
        raise ConfigError("est_labels and true_labels must be given together")
    have_beta = cfg["est_beta"] is not None or cfg["true_beta"] is not None
    if have_beta and (cfg["est_beta"] is None or cfg["true_beta"] is None):
        raise ConfigError("est_beta and true_beta must be given together")
    fit_paths = _expand_fit_results(cfg["fit_result"])
    if fit_paths and (cfg["true_phi"] is None or cfg["true_rho"] is None):
        raise ConfigError("fit_result scoring needs true_phi and true_rho")
    if not (have_labels or have_beta or fit_paths):
        raise ConfigError(
            "nothing to evaluate: give labels, coefficient grids, or fit results"
        )
    for key in ("est_labels", "true_labels", "est_beta", "true_beta"):
        if cfg[key] is not None:
            _require_file(key, cfg[key])

    stage.stage = "load"
    if have_labels:
        est_labels = network_data.read_labels(cfg["est_labels"])
        true_labels = network_data.read_labels(cfg["true_labels"])
    if have_beta:
        est_grid, est_beta = network_data.read_beta_grid(cfg["est_beta"])
        true_grid, true_beta = network_data.read_beta_grid(cfg["true_beta"])
    fits = [estimation.read_fit_result(path) for path in fit_paths]

    stage.stage = "compute"
    rows = []
    if have_labels:
        try:
            score = evaluation.nmi(est_labels, true_labels)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        rows.append(("nmi", "", _FMT % score.nmi))
    if have_beta:
        if est_grid.points.shape != true_grid.points.shape or not np.allclose(
            est_grid.points, true_grid.points, rtol=0.0, atol=1e-12
        ):
            raise DataError("coefficient grids are on different time grids")
        try:
            err = evaluation.err_beta(est_beta, true_beta)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        for j, value in enumerate(err):
            rows.append(("err", f"b{j + 1}", _FMT % value))
        if err.size:
            rows.append(("err", "mean", _FMT % float(err.mean())))
    if fits:
        truth = SimpleNamespace(phi=cfg["true_phi"], rho=cfg["true_rho"])
        report = evaluation.parameter_report(fits, truth)
        rows.append(("n_runs", "", str(report["n_runs"])))
        for key in ("phi_bias", "phi_se", "rho_bias", "rho_se"):
            value = report[key]
            rows.append((key, "", "" if value is None else _FMT % value))

    stage.stage = "write"
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _write_resolved(out, "eval", cfg)
    entries = [
        (key, cfg[key])
        for key in ("est_labels", "true_labels", "est_beta", "true_beta")
        if cfg[key] is not None
    ]
    entries.extend((f"fit_result_{i + 1}", path) for i, path in enumerate(fit_paths))
    _write_inputs(out, entries)
    _write_text(
        os.path.join(out, "scores.csv"),
        ["metric,component,value"] + [",".join(row) for row in rows],
    )
    _write_log(out, [
        (f"{metric}[{component}] = {value}" if component else f"{metric} = {value}")
        for metric, component, value in rows
    ])


def cmd_density(cfg, stage):
    tuples = cfg["tuple"]
    if not tuples:
        raise ConfigError("at least one --tuple y,mu,phi,rho is required")
    parsed = []
    for text in tuples:
        parts = str(text).split(",")
        if len(parts) != 4:
            raise ConfigError(f"tuple must be y,mu,phi,rho, got {text!r}")
        y, mu, phi, rho = (_as_float("tuple", part) for part in parts)
        if not (np.isfinite(y) and y >= 0.0):
            raise ConfigError(f"y must be finite and non-negative, got {parts[0].strip()}")
        if not (np.isfinite(mu) and mu > 0.0):
            raise ConfigError(f"mu must be finite and positive, got {parts[1].strip()}")
        if not (np.isfinite(phi) and phi > 0.0):
            raise ConfigError(f"phi must be finite and positive, got {parts[2].strip()}")
        if not 1.0 < rho < 2.0:
            raise ConfigError(f"rho must lie strictly inside (1, 2), got {parts[3].strip()}")
        parsed.append((y, mu, phi, rho))

    stage.stage = "compute"
    lines = ["y,mu,phi,rho,log_density"]
    for y, mu, phi, rho in parsed:
        value = float(
            tweedie_core.log_density_each(np.array([y]), np.array([mu]), phi, rho)[0]
        )
        lines.append(",".join(_FMT % v for v in (y, mu, phi, rho)) + "," + (_FMT % value))
    print("\n".join(lines))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Routes argparse usage errors into the config error exit path."""

    def error(self, message):
        raise ConfigError(message)


class _Stage:
    def __init__(self):
        self.stage = "config"


_SUBCOMMANDS = {
    "simulate": (_SIMULATE, cmd_simulate,
                 "draw a synthetic weighted network and write it as CSV files"),
    "fit": (_FIT, cmd_fit,
            "run the two-step estimator on a network manifest"),
    "cv": (_CV, cmd_cv,
           "select the roughness penalty by leave-one-time-out cross-validation"),
    "eval": (_EVAL, cmd_eval,
             "score estimates against ground truth"),
    "density": (_DENSITY, cmd_density,
                "print log-density values for y,mu,phi,rho tuples"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tweedie-sbm",
        description="Community detection in weighted networks with "
                    "compound Poisson-Gamma edge weights.",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for command, (options, _handler, blurb) in _SUBCOMMANDS.items():
        p = sub.add_parser(command, help=blurb, description=blurb)
        p.add_argument("--config", metavar="FILE", help="key = value settings file")
        for key, opt in options.items():
            flag = "--" + key.replace("_", "-")
            if opt.multi:
                p.add_argument(flag, dest=key, action="append", metavar="VALUE",
                               help=opt.help)
            else:
                p.add_argument(flag, dest=key, metavar="VALUE", help=opt.help)
    return parser


def main(argv=None) -> int:
    stage = _Stage()
    try:
        args = _build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError(
                "a subcommand is required: " + ", ".join(_SUBCOMMANDS)
            )
        options, handler, _blurb = _SUBCOMMANDS[args.command]
        handler(_resolve(options, args), stage)
    except TweedieSbmError as exc:
        if isinstance(exc, ConfigError):
            code = 2
        elif isinstance(exc, DataError):
            code = 3
        elif isinstance(exc, NumericalError):
            code = 4
        else:
            raise
        record = {"error": type(exc).__name__, "stage": stage.stage, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return code
    return 0
