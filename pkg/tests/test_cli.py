"""End-to-end checks of the command line driver, run in process."""

import json
import math
import os

import numpy as np
import pytest

from tweedie_sbm import estimation, evaluation, network_data, tweedie_core
from tweedie_sbm.cli import main


def run(args):
    return main([str(a) for a in args])


def read(path):
    with open(path, "r", encoding="utf-8") as handle:
        return handle.read()


def simulate_args(out, **kw):
    args = ["simulate", "--out", out]
    for key, value in kw.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, (tuple, list)):
            for item in value:
                args.extend([flag, item])
        else:
            args.extend([flag, value])
    return args


def stderr_record(capsys):
    err = capsys.readouterr().err.strip()
    return json.loads(err.splitlines()[-1])


class TestDensity:
    def test_values_match_library(self, capsys):
        assert run(["density", "--tuple", "0,1,1,1.5", "--tuple", "2.5,1.3,0.7,1.2"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "y,mu,phi,rho,log_density"
        assert len(lines) == 3
        for line, (y, mu, phi, rho) in zip(lines[1:], [(0, 1, 1, 1.5), (2.5, 1.3, 0.7, 1.2)]):
            got = float(line.split(",")[4])
            want = float(tweedie_core.log_density_each(np.array([y]), np.array([mu]), phi, rho)[0])
            assert got == pytest.approx(want, rel=1e-15)

    def test_zero_mass_is_closed_form(self, capsys):
        assert run(["density", "--tuple", "0,2,0.5,1.4"]) == 0
        value = float(capsys.readouterr().out.strip().splitlines()[1].split(",")[4])
        lam = 2.0 ** 0.6 / (0.5 * 0.6)
        assert value == pytest.approx(-lam, rel=1e-14)

    def test_requires_tuples(self, capsys):
        assert run(["density"]) == 2
        assert stderr_record(capsys)["stage"] == "config"

    def test_rejects_malformed_tuple(self, capsys):
        assert run(["density", "--tuple", "1,2,3"]) == 2
        assert run(["density", "--tuple", "1,2,3,x"]) == 2
        capsys.readouterr()

    def test_rejects_out_of_range_power(self, capsys):
        assert run(["density", "--tuple", "0,1,1,2.5"]) == 2
        record = stderr_record(capsys)
        assert record["error"] == "ConfigError"


class TestConfigResolution:
    def test_flags_override_file_values(self, tmp_path, capsys):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text("n = 12\nT = 2\nseed = 3  # trailing comment\n")
        out = tmp_path / "run"
        assert run(["simulate", "--config", cfg, "--out", out, "--T", 3]) == 0
        resolved = read(out / "config.resolved")
        assert "n = 12" in resolved
        assert "T = 3" in resolved
        assert "seed = 3" in resolved

    def test_unknown_key_rejected_before_output(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus = 1\n")
        out = tmp_path / "run"
        assert run(["simulate", "--config", cfg, "--out", out, "--n", 12]) == 2
        record = stderr_record(capsys)
        assert record["error"] == "ConfigError"
        assert "bogus" in record["message"]
        assert not out.exists()

    def test_malformed_line_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just some words\n")
        assert run(["simulate", "--config", cfg, "--out", tmp_path / "r", "--n", 12]) == 2
        capsys.readouterr()

    def test_duplicate_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("n = 12\nn = 13\n")
        assert run(["simulate", "--config", cfg, "--out", tmp_path / "r"]) == 2
        capsys.readouterr()

    def test_repeated_multi_key_accumulates(self, tmp_path):
        cfg = tmp_path / "sim.cfg"
        cfg.write_text("beta_t = 2t-1\nbeta_t = zero\n")
        out = tmp_path / "run"
        args = ["simulate", "--config", cfg, "--out", out, "--n", 14, "--T", 4, "--p", 2]
        assert run(args) == 0
        assert "beta_t = 2t-1,zero" in read(out / "config.resolved")

    def test_unrecognized_flag_is_config_error(self, capsys):
        assert run(["simulate", "--nope", 1]) == 2
        assert stderr_record(capsys)["error"] == "ConfigError"

    def test_missing_subcommand(self, capsys):
        assert run([]) == 2
        capsys.readouterr()


class TestSimulate:
    def test_writes_complete_run_directory(self, tmp_path):
        out = tmp_path / "sim"
        args = simulate_args(out, n=20, T=3, p=1, beta_t="2t-1", seed=4)
        assert run(args) == 0
        for name in ("manifest.csv", "y_000.csv", "y_001.csv", "y_002.csv",
                     "x_1.csv", "labels_true.csv", "beta_true.csv",
                     "config.resolved", "log.txt"):
            assert (out / name).is_file(), name
        network, covariates = network_data.load_csv(out / "manifest.csv", [out / "x_1.csv"])
        assert network.n == 20 and network.T == 3 and covariates.p == 1
        labels = network_data.read_labels(out / "labels_true.csv")
        assert labels.n == 20

    def test_no_covariate_files_when_p_zero(self, tmp_path):
        out = tmp_path / "sim"
        assert run(simulate_args(out, n=12, seed=1)) == 0
        assert not (out / "x_1.csv").exists()
        assert not (out / "beta_true.csv").exists()

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(simulate_args(out, n=18, T=4, p=1, beta_t="sin2pit", seed=9)) == 0
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b))
        for name in names:
            if name == "config.resolved":
                continue
            assert read(a / name) == read(b / name), name

    def test_scenario_presets_recorded(self, tmp_path):
        out = tmp_path / "sim"
        assert run(simulate_args(out, n=12, scenario=2, seed=0)) == 0
        resolved = read(out / "config.resolved")
        assert "beta0_diag = 0.5" in resolved
        assert "beta0_offdiag = -0.5" in resolved

    def test_explicit_intercepts_override_scenario(self, tmp_path):
        out = tmp_path / "sim"
        args = simulate_args(out, n=12, scenario=3, beta0_diag=2.0, seed=0)
        assert run(args) == 0
        resolved = read(out / "config.resolved")
        assert "beta0_diag = 2" in resolved
        assert "beta0_offdiag = -1" in resolved

    def test_default_prior_for_three_communities(self, tmp_path):
        out = tmp_path / "sim"
        assert run(simulate_args(out, n=12, seed=0)) == 0
        assert "pi = 0.2" in read(out / "config.resolved")

    def test_uniform_prior_otherwise(self, tmp_path):
        out = tmp_path / "sim"
        assert run(simulate_args(out, n=12, K=2, seed=0)) == 0
        assert "pi = 0.5,0.5" in read(out / "config.resolved")

    def test_missing_n_is_config_error(self, tmp_path, capsys):
        assert run(["simulate", "--out", tmp_path / "sim"]) == 2
        assert stderr_record(capsys)["message"].startswith("n is required")

    def test_bad_scenario_is_config_error(self, tmp_path, capsys):
        assert run(simulate_args(tmp_path / "s", n=12, scenario=9)) == 2
        capsys.readouterr()

    def test_covariates_need_forms(self, tmp_path, capsys):
        assert run(simulate_args(tmp_path / "s", n=12, p=1)) == 2
        capsys.readouterr()


@pytest.fixture(scope="module")
def static_run(tmp_path_factory):
    """One strongly separated static network plus a fit of it."""
    root = tmp_path_factory.mktemp("static")
    sim = root / "sim"
    assert run(simulate_args(sim, n=40, phi=0.5, rho=1.5, seed=21)) == 0
    fit = root / "fit"
    assert run(["fit", "--out", fit, "--manifest", sim / "manifest.csv",
                "--K", 3, "--rho-grid", 1.5, "--n-starts", 6, "--seed", 6]) == 0
    return sim, fit


class TestFit:
    def test_recovers_planted_communities(self, static_run):
        sim, fit = static_run
        est = network_data.read_labels(fit / "labels_hat.csv")
        truth = network_data.read_labels(sim / "labels_true.csv")
        assert evaluation.nmi(est, truth).nmi == 1.0

    def test_writes_complete_run_directory(self, static_run):
        _, fit = static_run
        for name in ("fit_result.txt", "labels_hat.csv", "beta_hat.csv",
                     "config.resolved", "inputs.txt", "log.txt"):
            assert (fit / name).is_file(), name
        result = estimation.read_fit_result(fit / "fit_result.txt")
        assert result.rho_hat == 1.5

    def test_log_traces_every_restart(self, static_run):
        _, fit = static_run
        lines = read(fit / "log.txt").strip().splitlines()
        starts = {line.split()[1] for line in lines if " iter=" in line}
        assert starts == {f"start={s}" for s in range(6)}
        assert lines[-1].startswith("selected rho=1.5 loglik=")
        assert all(" elbo=" in line or "loglik=" in line for line in lines)

    def test_effective_defaults_recorded(self, static_run):
        _, fit = static_run
        resolved = read(fit / "config.resolved")
        assert "lam = 0.5" in resolved
        assert "max_iters = 200" in resolved
        assert "rho_grid = 1.5" in resolved

    def test_missing_covariate_file_fails_before_output(self, tmp_path, capsys):
        sim = tmp_path / "sim"
        assert run(simulate_args(sim, n=12, seed=0)) == 0
        out = tmp_path / "fit"
        code = run(["fit", "--out", out, "--manifest", sim / "manifest.csv",
                    "--covariate", tmp_path / "nope.csv", "--K", 2])
        assert code == 2
        record = stderr_record(capsys)
        assert record["stage"] == "config"
        assert "nope.csv" in record["message"]
        assert not out.exists()

    def test_non_finite_input_is_data_error(self, tmp_path, capsys):
        sim = tmp_path / "sim"
        assert run(simulate_args(sim, n=10, seed=0)) == 0
        bad = read(sim / "y_000.csv").replace("0,", "nan,", 1)
        (sim / "y_000.csv").write_text(bad)
        out = tmp_path / "fit"
        code = run(["fit", "--out", out, "--manifest", sim / "manifest.csv", "--K", 2])
        assert code == 3
        record = stderr_record(capsys)
        assert record["error"] == "DataError"
        assert record["stage"] == "load"
        assert not out.exists()

    def test_all_zero_network_is_numerical_error(self, tmp_path, capsys):
        out_dir = tmp_path / "data"
        grid = network_data.uniform_grid(1)
        network = network_data.DynamicNetwork(grid=grid, Y=np.zeros((1, 8, 8)))
        manifest = network_data.write_network(network, out_dir)
        out = tmp_path / "fit"
        code = run(["fit", "--out", out, "--manifest", manifest,
                    "--K", 2, "--rho-grid", 1.5, "--n-starts", 2])
        assert code == 4
        record = stderr_record(capsys)
        assert record["error"] == "FitError"
        assert record["stage"] == "compute"
        assert not out.exists()

    def test_bad_power_grid_is_config_error(self, tmp_path, capsys):
        code = run(["fit", "--out", tmp_path / "f", "--manifest", tmp_path / "m.csv",
                    "--K", 2, "--rho-grid", "2.5"])
        assert code == 2
        capsys.readouterr()

    def test_config_file_drives_fit(self, tmp_path, static_run):
        sim, fit = static_run
        cfg = tmp_path / "fit.cfg"
        cfg.write_text(
            f"manifest = {sim / 'manifest.csv'}\nK = 3\nrho_grid = 1.5\n"
            "n_starts = 6\nseed = 6\n"
        )
        out = tmp_path / "fit2"
        assert run(["fit", "--config", cfg, "--out", out]) == 0
        assert read(out / "labels_hat.csv") == read(fit / "labels_hat.csv")

    def test_threads_do_not_change_bytes(self, tmp_path):
        sim = tmp_path / "sim"
        assert run(simulate_args(sim, n=16, T=4, p=1, beta_t="2t-1", seed=2)) == 0
        outs = []
        for name, threads in (("t1", 1), ("t8", 8)):
            out = tmp_path / name
            assert run(["fit", "--out", out, "--manifest", sim / "manifest.csv",
                        "--covariate", sim / "x_1.csv", "--K", 2,
                        "--rho-grid", "1.4,1.6", "--n-starts", 2, "--seed", 5,
                        "--threads", threads]) == 0
            outs.append(out)
        for name in ("fit_result.txt", "labels_hat.csv", "beta_hat.csv", "log.txt"):
            assert read(outs[0] / name) == read(outs[1] / name), name


class TestCv:
    def test_report_and_refit_outputs(self, tmp_path):
        sim = tmp_path / "sim"
        assert run(simulate_args(sim, n=14, K=2, pi="0.5,0.5", T=5, seed=3)) == 0
        out = tmp_path / "cv"
        code = run(["cv", "--out", out, "--manifest", sim / "manifest.csv",
                    "--K", 2, "--rho-grid", 1.5, "--lambda-grid", "0.1,1",
                    "--n-starts", 2, "--seed", 7])
        assert code == 0
        lines = read(out / "cv_report.csv").strip().splitlines()
        # header + 2 penalties x 3 folds + 2 means + 1 winner
        assert len(lines) == 1 + 6 + 2 + 1
        assert lines[0] == "lambda,fold,time,loss"
        assert lines[-1].split(",")[1] == "best"
        for name in ("fit_result.txt", "labels_hat.csv", "beta_hat.csv",
                     "config.resolved", "inputs.txt", "log.txt"):
            assert (out / name).is_file(), name
        log = read(out / "log.txt")
        assert "lambda_star=" in log
        assert "selected rho=" in log
        resolved = read(out / "config.resolved")
        assert "lambda_grid = 0.10000000000000001,1" in resolved

    def test_too_few_times_is_data_error(self, tmp_path, capsys):
        sim = tmp_path / "sim"
        assert run(simulate_args(sim, n=12, T=2, seed=0)) == 0
        code = run(["cv", "--out", tmp_path / "cv", "--manifest",
                    sim / "manifest.csv", "--K", 2, "--rho-grid", 1.5])
        assert code == 3
        assert stderr_record(capsys)["stage"] == "compute"

    def test_negative_penalty_is_config_error(self, tmp_path, capsys):
        code = run(["cv", "--out", tmp_path / "cv", "--manifest", tmp_path / "m",
                    "--K", 2, "--lambda-grid", "-1,1"])
        assert code == 2
        capsys.readouterr()


class TestEval:
    def test_label_and_coefficient_scores(self, tmp_path, static_run):
        sim, fit = static_run
        out = tmp_path / "ev"
        code = run(["eval", "--out", out,
                    "--est-labels", fit / "labels_hat.csv",
                    "--true-labels", sim / "labels_true.csv"])
        assert code == 0
        lines = read(out / "scores.csv").strip().splitlines()
        assert lines[0] == "metric,component,value"
        row = dict((line.split(",")[0], line.split(",")[2]) for line in lines[1:])
        assert float(row["nmi"]) == 1.0
        assert (out / "log.txt").is_file()

    def test_coefficient_error_rows(self, tmp_path):
        grid = network_data.uniform_grid(4)
        truth = np.column_stack([2.0 * grid.points - 1.0])
        est = truth + 0.1
        network_data.write_beta_grid(tmp_path / "true.csv", grid, truth)
        network_data.write_beta_grid(tmp_path / "est.csv", grid, est)
        out = tmp_path / "ev"
        assert run(["eval", "--out", out, "--est-beta", tmp_path / "est.csv",
                    "--true-beta", tmp_path / "true.csv"]) == 0
        lines = read(out / "scores.csv").strip().splitlines()[1:]
        values = {tuple(line.split(",")[:2]): float(line.split(",")[2]) for line in lines}
        assert values[("err", "b1")] == pytest.approx(0.01, rel=1e-12)
        assert values[("err", "mean")] == pytest.approx(0.01, rel=1e-12)

    def test_mismatched_grids_is_data_error(self, tmp_path, capsys):
        g4, g5 = network_data.uniform_grid(4), network_data.uniform_grid(5)
        network_data.write_beta_grid(tmp_path / "a.csv", g4, np.zeros((4, 1)))
        network_data.write_beta_grid(tmp_path / "b.csv", g5, np.zeros((5, 1)))
        code = run(["eval", "--out", tmp_path / "ev", "--est-beta", tmp_path / "a.csv",
                    "--true-beta", tmp_path / "b.csv"])
        assert code == 3
        capsys.readouterr()

    def test_aggregates_runs_from_directory(self, tmp_path, static_run):
        sim, fit = static_run
        runs = tmp_path / "runs"
        for i, seed in enumerate((6, 7)):
            code = run(["fit", "--out", runs / f"run{i}", "--manifest",
                        sim / "manifest.csv", "--K", 2, "--rho-grid", 1.5,
                        "--n-starts", 3, "--seed", seed])
            assert code == 0
        out = tmp_path / "ev"
        assert run(["eval", "--out", out, "--fit-result", runs,
                    "--true-phi", 0.5, "--true-rho", 1.5]) == 0
        lines = read(out / "scores.csv").strip().splitlines()[1:]
        values = dict((line.split(",")[0], line.split(",")[2]) for line in lines)
        assert values["n_runs"] == "2"
        assert values["rho_bias"] == "0"
        assert values["phi_se"] != ""
        inputs = read(out / "inputs.txt").strip().splitlines()
        assert len(inputs) == 2

    def test_single_result_has_blank_spread(self, tmp_path, static_run):
        _, fit = static_run
        out = tmp_path / "ev"
        assert run(["eval", "--out", out, "--fit-result", fit / "fit_result.txt",
                    "--true-phi", 0.5, "--true-rho", 1.5]) == 0
        lines = read(out / "scores.csv").strip().splitlines()[1:]
        values = dict((line.split(",")[0], line.split(",", 2)[2]) for line in lines)
        assert values["phi_se"] == ""

    def test_truth_required_for_fit_results(self, tmp_path, static_run, capsys):
        _, fit = static_run
        code = run(["eval", "--out", tmp_path / "ev", "--fit-result",
                    fit / "fit_result.txt", "--true-phi", 0.5])
        assert code == 2
        capsys.readouterr()

    def test_half_a_pair_is_config_error(self, tmp_path, static_run, capsys):
        _, fit = static_run
        code = run(["eval", "--out", tmp_path / "ev",
                    "--est-labels", fit / "labels_hat.csv"])
        assert code == 2
        capsys.readouterr()

    def test_nothing_to_do_is_config_error(self, tmp_path, capsys):
        assert run(["eval", "--out", tmp_path / "ev"]) == 2
        capsys.readouterr()


class TestPipelineDeterminism:
    def test_two_invocations_bitwise_identical(self, tmp_path):
        results = []
        for name in ("one", "two"):
            root = tmp_path / name
            sim = root / "sim"
            assert run(simulate_args(sim, n=16, T=4, p=1, beta_t="2t-1",
                                     phi=0.5, rho=1.5, seed=13)) == 0
            fit = root / "fit"
            assert run(["fit", "--out", fit, "--manifest", sim / "manifest.csv",
                        "--covariate", sim / "x_1.csv", "--K", 2,
                        "--rho-grid", 1.5, "--n-starts", 2, "--seed", 4]) == 0
            ev = root / "ev"
            assert run(["eval", "--out", ev,
                        "--est-labels", fit / "labels_hat.csv",
                        "--true-labels", sim / "labels_true.csv",
                        "--est-beta", fit / "beta_hat.csv",
                        "--true-beta", sim / "beta_true.csv"]) == 0
            results.append(root)
        for sub in ("sim", "fit", "ev"):
            a, b = results[0] / sub, results[1] / sub
            for name in sorted(os.listdir(a)):
                if name in ("config.resolved", "inputs.txt"):
                    continue
                assert read(a / name) == read(b / name), f"{sub}/{name}"
