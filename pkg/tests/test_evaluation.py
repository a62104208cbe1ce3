"""Tests for clustering and coefficient-recovery scoring."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from sklearn.metrics import normalized_mutual_info_score

from tweedie_sbm.evaluation import err_beta, nmi, parameter_report
from tweedie_sbm.network_data import CommunityLabels


def labels_of(values, K=None):
    values = np.asarray(values, dtype=int)
    return CommunityLabels(labels=values, K=K or int(values.max()))


class TestNmi:
    def test_identical_labelings_score_one(self):
        a = labels_of([1, 1, 2, 2, 3])
        assert nmi(a, a).nmi == 1.0

    def test_label_permutation_scores_one(self):
        a = labels_of([1, 1, 2, 2, 3, 3])
        b = labels_of([3, 3, 1, 1, 2, 2])
        assert nmi(a, b).nmi == 1.0

    def test_symmetric_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = labels_of(rng.integers(1, 4, size=30), K=3)
            b = labels_of(rng.integers(1, 5, size=30), K=4)
            assert nmi(a, b).nmi == nmi(b, a).nmi

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(1)
        a = labels_of(rng.integers(1, 4, size=40), K=3)
        b = labels_of(rng.integers(1, 4, size=40), K=3)
        perm = np.array([2, 3, 1])
        a_relabeled = labels_of(perm[a.labels - 1], K=3)
        assert nmi(a, b).nmi == pytest.approx(nmi(a_relabeled, b).nmi, abs=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference_implementation(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(1, 4, size=200)
        b = rng.integers(1, 5, size=200)
        score = nmi(labels_of(a, K=3), labels_of(b, K=4))
        expected = normalized_mutual_info_score(a, b, average_method="arithmetic")
        assert_allclose(score.nmi, expected, atol=1e-10)

    def test_independent_labelings_score_near_zero(self):
        rng = np.random.default_rng(7)
        a = labels_of(rng.integers(1, 4, size=10_000), K=3)
        b = labels_of(rng.integers(1, 4, size=10_000), K=3)
        assert nmi(a, b).nmi < 0.01

    def test_contingency_counts(self):
        a = labels_of([1, 1, 2, 2], K=2)
        b = labels_of([1, 2, 2, 2], K=2)
        score = nmi(a, b)
        assert np.array_equal(score.contingency, [[1, 1], [0, 2]])
        assert score.contingency.sum() == 4

    def test_both_single_cluster_scores_one(self):
        a = labels_of([1, 1, 1], K=1)
        assert nmi(a, a).nmi == 1.0

    def test_single_against_split_scores_zero(self):
        a = labels_of([1, 1, 1, 1], K=1)
        b = labels_of([1, 1, 2, 2], K=2)
        assert nmi(a, b).nmi == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="nodes"):
            nmi(labels_of([1, 2]), labels_of([1, 2, 1]))


class TestErrBeta:
    def test_exact_recovery_is_zero(self):
        truth = np.linspace(0, 1, 8).reshape(4, 2)
        assert_allclose(err_beta(truth, truth), np.zeros(2), atol=0)

    def test_constant_offset_squares(self):
        truth = np.zeros((5, 3))
        est = truth + np.array([0.1, -0.2, 0.3])
        assert_allclose(err_beta(est, truth), [0.01, 0.04, 0.09], rtol=1e-14)

    def test_quadratic_scaling(self):
        rng = np.random.default_rng(11)
        truth = rng.normal(size=(6, 2))
        bump = rng.normal(size=(6, 2))
        base = err_beta(truth + bump, truth)
        scaled = err_beta(truth + 2.5 * bump, truth)
        assert_allclose(scaled, 2.5**2 * base, rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            err_beta(np.zeros((4, 2)), np.zeros((4, 3)))
        with pytest.raises(ValueError, match="shape"):
            err_beta(np.zeros(4), np.zeros(4))


class _FakeFit:
    def __init__(self, phi_hat, rho_hat):
        self.phi_hat = phi_hat
        self.rho_hat = rho_hat


class _FakeTruth:
    phi = 1.0
    rho = 1.5


class TestParameterReport:
    def test_single_run_has_no_spread(self):
        report = parameter_report(_FakeFit(1.0, 1.5), _FakeTruth())
        assert report["n_runs"] == 1
        assert report["phi_bias"] == 0.0
        assert report["rho_bias"] == 0.0
        assert report["phi_se"] is None
        assert report["rho_se"] is None

    def test_multi_run_summaries(self):
        phis = [0.9, 1.1, 1.0, 1.2]
        rhos = [1.5, 1.5, 1.8, 1.2]
        fits = [_FakeFit(p, r) for p, r in zip(phis, rhos)]
        nmis = [0.9, 1.0, 0.95, 1.0]
        errs = [[0.01, 0.02], [0.02, 0.01], [0.015, 0.03], [0.01, 0.01]]
        report = parameter_report(fits, _FakeTruth(), nmi_values=nmis, err_values=errs)
        assert report["n_runs"] == 4
        assert_allclose(report["phi_bias"], np.mean(phis) - 1.0, rtol=1e-14)
        assert_allclose(report["phi_se"], np.std(phis, ddof=1), rtol=1e-14)
        assert_allclose(report["rho_bias"], np.mean(rhos) - 1.5, rtol=1e-14)
        assert_allclose(report["nmi_mean"], np.mean(nmis), rtol=1e-14)
        assert_allclose(report["err_mean"], np.mean(errs, axis=0), rtol=1e-14)
        assert_allclose(report["err_se"], np.std(errs, axis=0, ddof=1), rtol=1e-14)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            parameter_report([], _FakeTruth())
