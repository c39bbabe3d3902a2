import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_phi, random_bank
from featgroup.analysis import (
    PenaltyReport,
    bank_scores,
    delta_second_moment,
    delta_x_moment,
    dropout_bank,
    estimate_omega,
    first_order_term,
    penalty,
    taylor_check,
    var_target,
    write_matrix_csv,
)
from featgroup.bank import ProjectionBank
from featgroup.numkit import identity_grouping, make_rng


@pytest.fixture
def split5_bank(split5_phis):
    return ProjectionBank(split5_phis)


def dense_moments(bank):
    """Oracle: dense products straight from the definitions."""
    grams = [d.T @ d for d in (dense_phi(part) for part in bank.partitions)]
    omega = sum(grams) / len(grams)
    second = sum((g - omega).T @ (g - omega) for g in grams) / len(grams)
    return omega, second


class TestOmega:
    def test_three_two_and_two_three(self, split5_bank):
        om = estimate_omega(split5_bank).omega
        np.testing.assert_allclose(np.diag(om), [5 / 12, 5 / 12, 1 / 3, 5 / 12, 5 / 12], atol=1e-12)
        assert om[0, 2] == pytest.approx(1 / 6, abs=1e-12)
        assert om[0, 3] == 0.0

    def test_single_matrix(self, split5_phis):
        d = split5_phis[0].to_dense()
        np.testing.assert_allclose(estimate_omega(ProjectionBank(split5_phis[:1])).omega, d.T @ d, atol=1e-15)

    def test_identity(self):
        np.testing.assert_array_equal(estimate_omega(ProjectionBank((identity_grouping(6),))).omega, np.eye(6))

    def test_matches_dense_oracle(self):
        bank = random_bank(make_rng(3), 20, 6, 15)
        np.testing.assert_allclose(estimate_omega(bank).omega, dense_moments(bank)[0], atol=1e-14)

    def test_dense_guard(self):
        bank = ProjectionBank((identity_grouping(4097),))
        with pytest.raises(ValueError, match="matrix-free"):
            estimate_omega(bank)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), p=st.integers(2, 30), b=st.integers(1, 12))
    def test_invariants(self, seed, p, b):
        rng = make_rng(seed)
        bank = random_bank(rng, p, int(rng.integers(1, p + 1)), b)
        om = estimate_omega(bank).omega
        assert np.array_equal(om, om.T) or np.abs(om - om.T).max() <= 1e-15
        assert om.min() >= 0
        assert np.linalg.eigvalsh(om - om @ om).min() >= -1e-10


class TestDeltaSecondMoment:
    def test_three_two_and_two_three(self, split5_bank):
        d = delta_second_moment(split5_bank)
        diag = np.diag(d)
        np.testing.assert_allclose(diag, [1 / 24, 1 / 24, 1 / 9, 1 / 24, 1 / 24], atol=1e-12)
        assert np.argmax(diag) == 2 and np.sum(diag == diag.max()) == 1

    def test_single_and_identity_are_zero(self, split5_phis):
        np.testing.assert_allclose(delta_second_moment(ProjectionBank(split5_phis[:1])), 0, atol=1e-15)
        np.testing.assert_array_equal(delta_second_moment(ProjectionBank((identity_grouping(5),))), 0)

    def test_matches_dense_oracle(self):
        bank = random_bank(make_rng(4), 18, 5, 9)
        np.testing.assert_allclose(delta_second_moment(bank), dense_moments(bank)[1], atol=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), p=st.integers(1, 40), b=st.integers(1, 20))
    def test_identity_with_omega(self, seed, p, b):
        rng = make_rng(seed)
        bank = random_bank(rng, p, int(rng.integers(1, p + 1)), b)
        om = estimate_omega(bank)
        lhs = delta_second_moment(bank, om)
        assert np.abs(lhs - (om.omega - om.omega @ om.omega)).max() <= 1e-12


class TestVarTarget:
    def test_zero_beta(self, split5_bank):
        assert var_target(split5_bank, np.arange(5.0), np.zeros(5)) == 0.0

    def test_single_matrix(self, split5_phis):
        bank = ProjectionBank(split5_phis[:1])
        assert var_target(bank, np.arange(5.0), np.ones(5)) == pytest.approx(0.0, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_quadratic_form(self, seed):
        rng = make_rng(seed)
        bank = random_bank(rng, 12, int(rng.integers(1, 13)), 10)
        x, beta = rng.normal(size=12), rng.normal(size=12)
        m_hat = delta_x_moment(bank, x)
        assert abs(var_target(bank, x, beta) - beta @ m_hat @ beta) <= 1e-10

    def test_matrix_input(self):
        rng = make_rng(2)
        bank = random_bank(rng, 10, 4, 6)
        X, beta = rng.normal(size=(5, 10)), rng.normal(size=10)
        np.testing.assert_allclose(var_target(bank, X, beta), [var_target(bank, x, beta) for x in X], atol=1e-15)

    def test_dimension_mismatch(self, split5_bank):
        with pytest.raises(ValueError, match="dimension"):
            var_target(split5_bank, np.ones(4), np.ones(5))

    @pytest.mark.parametrize("delta", [0.1, 0.25, 0.5])
    @pytest.mark.parametrize("p", [1, 6, 10])
    def test_dropout_closed_form(self, p, delta):
        rng = make_rng(p)
        x, beta = rng.normal(size=p), rng.normal(size=p)
        got = var_target(dropout_bank(p, delta), x, beta)
        assert abs(got - delta / (1 - delta) * np.sum(x**2 * beta**2)) <= 1e-12

    def test_dropout_bank_is_distribution(self):
        bank = dropout_bank(4, 0.3)
        assert bank.b == 16
        assert bank.probabilities().sum() == pytest.approx(1.0, abs=1e-15)
        # zero-drop bank is a single identity mask with all the mass
        np.testing.assert_allclose(estimate_omega(dropout_bank(3, 0.0)).omega, np.eye(3), atol=1e-15)

    def test_dropout_bank_limits(self):
        with pytest.raises(ValueError):
            dropout_bank(17, 0.1)
        with pytest.raises(ValueError):
            dropout_bank(3, 1.0)


class TestFirstOrderTerm:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_vanishes(self, seed):
        rng = make_rng(seed)
        bank = random_bank(rng, 15, int(rng.integers(1, 16)), 8)
        x, beta = rng.normal(size=15), rng.normal(size=15)
        assert abs(first_order_term(bank, x, beta)) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(beta)


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


class TestPenalty:
    def test_gaussian_is_sum_of_variances(self):
        rng = make_rng(5)
        bank = random_bank(rng, 9, 3, 7)
        X, beta, y = rng.normal(size=(6, 9)), rng.normal(size=9), rng.normal(size=6)
        rep = penalty(beta, X, y, bank, "gaussian")
        np.testing.assert_array_equal(rep.per_sample_app, 1.0)
        assert rep.penalty == pytest.approx(sum(var_target(bank, x, beta) for x in X), rel=1e-13)

    def test_zero_beta(self):
        rng = make_rng(6)
        bank = random_bank(rng, 9, 3, 7)
        X, y = rng.normal(size=(6, 9)), rng.integers(0, 2, size=6)
        rep = penalty(np.zeros(9), X, y, bank, "logistic")
        assert rep.penalty == 0.0
        assert rep.smoothed_loss == pytest.approx(6 * math.log(2), rel=1e-15)

    def test_logistic_against_sigmoid_oracle(self):
        rng = make_rng(7)
        bank = random_bank(rng, 8, 3, 5)
        omega, _ = dense_moments(bank)
        X, beta, y = rng.normal(size=(5, 8)), rng.normal(size=8), rng.integers(0, 2, size=5)
        rep = penalty(beta, X, y, bank, "logistic")
        expected = [sigmoid(float(x @ omega @ beta)) * (1 - sigmoid(float(x @ omega @ beta))) for x in X]
        assert np.abs(rep.per_sample_app - expected).max() <= 1e-12
        assert np.all((rep.per_sample_app > 0) & (rep.per_sample_app <= 0.25))
        assert rep.objective == pytest.approx(rep.smoothed_loss + 0.5 * rep.penalty)

    def test_unknown_family(self, split5_bank):
        with pytest.raises(ValueError):
            penalty(np.ones(5), np.ones((2, 5)), [0, 1], split5_bank, "poisson")

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.one_of(st.just(0.0), st.floats(1e-3, 10), st.floats(-10, -1e-3)))
    def test_gaussian_homogeneity_and_sign(self, seed, c):
        rng = make_rng(seed)
        bank = random_bank(rng, 10, int(rng.integers(1, 11)), 6)
        X, beta, y = rng.normal(size=(4, 10)), rng.normal(size=10), rng.normal(size=4)
        r1 = penalty(beta, X, y, bank, "gaussian").penalty
        rc = penalty(c * beta, X, y, bank, "gaussian").penalty
        assert r1 >= 0 and rc >= 0
        # R vanishes when every bank member is the identity; floor the scale by rounding level
        floor = 1e-12 * np.sum(X**2) * np.sum(beta**2)
        assert abs(rc - c * c * r1) <= 1e-10 * c * c * max(r1, floor)
        assert penalty(beta, X, (y > 0).astype(int), bank, "logistic").penalty >= 0

    def test_json(self, tmp_path):
        rep = PenaltyReport(1.5, 0.25, np.array([0.1, 0.2]), np.array([0.3, 0.4]))
        rep.to_json(tmp_path / "r.json")
        data = json.loads((tmp_path / "r.json").read_text())
        assert set(data) == {"smoothed_loss", "penalty", "per_sample_app", "per_sample_var"}
        assert data["per_sample_var"] == [0.3, 0.4]


class TestTaylor:
    @pytest.mark.parametrize("seed", range(10))
    def test_gaussian_exact(self, seed):
        rng = make_rng(seed)
        p = int(rng.integers(2, 33))
        bank = random_bank(rng, p, int(rng.integers(1, p + 1)), int(rng.integers(1, 65)))
        X, beta, y = rng.normal(size=(7, p)), rng.normal(size=p), rng.normal(size=7)
        lhs, rhs, gap = taylor_check(beta, X, y, bank, "gaussian")
        assert abs(gap) <= 1e-10
        assert gap == lhs - rhs

    @pytest.mark.parametrize("seed", range(5))
    def test_logistic_cubic(self, seed):
        rng = make_rng(50 + seed)
        bank = random_bank(rng, 16, 5, 20)
        X, beta, y = rng.normal(size=(10, 16)), rng.normal(size=16), rng.integers(0, 2, size=10)
        beta /= np.abs(bank_scores(bank, X, beta)).max()
        gaps = [abs(taylor_check(s * beta, X, y, bank, "logistic")[2]) for s in (1, 0.5, 0.25)]
        assert gaps[0] / gaps[1] >= 8 / 2 and gaps[1] / gaps[2] >= 8 / 2

    def test_identity_bank_zero_gap(self):
        rng = make_rng(1)
        bank = ProjectionBank((identity_grouping(6),))
        X, beta, y = rng.normal(size=(4, 6)), rng.normal(size=6), rng.integers(0, 2, size=4)
        assert taylor_check(beta, X, y, bank, "logistic")[2] == 0.0


def test_bank_scores_shape(split5_bank):
    s = bank_scores(split5_bank, np.ones((3, 5)), np.ones(5))
    assert s.shape == (2, 3)
    # constant vectors are fixed by every projector
    np.testing.assert_allclose(s, 5.0, atol=1e-14)


def test_matrix_csv_roundtrip(tmp_path, split5_bank):
    om = estimate_omega(split5_bank).omega
    write_matrix_csv(om, tmp_path / "omega.csv")
    assert np.array_equal(np.loadtxt(tmp_path / "omega.csv", delimiter=","), om)
