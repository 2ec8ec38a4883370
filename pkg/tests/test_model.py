import numpy as np
import pytest
from conftest import random_state
from hypothesis import given
from hypothesis import strategies as st

from sihmm.model import (
    DataSummary,
    EmissionPrior,
    Hyperparams,
    build_tilted,
    init_global,
    log_sigmoid_pair,
    make_features,
    mean_transition,
    segmentation_logprob,
    stick_breaking_mean,
)

SUMMARY = DataSummary(dim=1, mean=np.zeros(1), cov=np.eye(1))


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        Hyperparams(gamma=0.0)
    with pytest.raises(ValueError):
        Hyperparams(K=0)
    with pytest.raises(ValueError):
        Hyperparams(variant="hsmm")
    with pytest.raises(ValueError):
        EmissionPrior(family="gamma")


def test_small_gamma_puts_mass_on_first_stick():
    state = init_global(Hyperparams(gamma=1e-9, K=5), SUMMARY, 0)
    assert state.beta[0] == pytest.approx(1.0, abs=1e-8)


def test_rows_exchangeable_without_sticky_bias():
    state = init_global(Hyperparams(alpha=3.0, K=6), SUMMARY, 0)
    assert np.all(state.trans_conc == state.trans_conc[0])


def test_sticky_bias_only_touches_diagonal():
    plain = init_global(Hyperparams(K=4), SUMMARY, 0)
    sticky = init_global(Hyperparams(K=4, kappa=2.5), SUMMARY, 0)
    diff = sticky.trans_conc - plain.trans_conc
    np.testing.assert_allclose(np.diag(diff[:, :4]), 2.5)
    diff[np.arange(4), np.arange(4)] = 0
    assert np.all(diff == 0)


def test_init_deterministic():
    h = Hyperparams(K=7, variant="feature-based")
    a, b = init_global(h, SUMMARY, 11), init_global(h, SUMMARY, 11)
    for name in ("beta", "trans_conc", "init_conc", "emission_eta", "omega", "theta"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_state_is_immutable():
    state = init_global(Hyperparams(K=3), SUMMARY, 0)
    with pytest.raises(ValueError):
        state.beta[0] = 0.5


def test_stick_breaking_sums_to_one():
    assert stick_breaking_mean(2.0, 10).sum() == pytest.approx(1.0)


class TestSegmentationHead:
    def test_feature_independent_half(self):
        lp, lq = segmentation_logprob("feature-independent", np.array([0.5]), np.zeros(0), np.zeros(0), 0)
        assert lp == pytest.approx(np.log(0.5)) and lq == pytest.approx(np.log(0.5))

    def test_feature_based_zero(self):
        lp, lq = segmentation_logprob("feature-based", np.zeros(1), np.zeros(2), np.ones(2), 0)
        assert lp == pytest.approx(np.log(0.5)) and lq == pytest.approx(np.log(0.5))

    def test_feature_based_value(self):
        lp, _ = segmentation_logprob("feature-based", np.array([0.5]), np.array([2.0, -1.0]), np.ones(2), 0)
        assert np.exp(lp) == pytest.approx(0.8175744761936437, abs=1e-12)

    def test_baseline_never_segments(self):
        assert segmentation_logprob("ihmm-baseline", np.zeros(1), np.zeros(0), np.zeros(0), 0) == (-np.inf, 0.0)

    @given(st.floats(-700, 700))
    def test_pair_sums_to_one(self, x):
        lp, lq = log_sigmoid_pair(x)
        assert np.exp(lp) + np.exp(lq) == pytest.approx(1.0, abs=1e-12)

    def test_feature_kinds(self):
        Y = np.array([[1.0], [2.0]])
        np.testing.assert_array_equal(make_features("bias+raw", Y), [[1, 1], [1, 2]])
        np.testing.assert_array_equal(make_features("onehot:3", np.array([[2.0], [0.0]])), [[0, 0, 1], [1, 0, 0]])
        with pytest.raises(ValueError):
            make_features("onehot:2", np.array([[5.0]]))


class TestTilted:
    def test_single_state(self):
        state = random_state(K=1, seed=3)
        tilted = build_tilted(state, np.zeros((4, 1)))
        assert tilted.log_trans.shape == (1, 1) and tilted.log_init.shape == (1,)

    def test_delta_emissions_give_gaussian_logpdf(self):
        state = random_state(K=2, seed=4)
        fam = state.spec.family
        n = 1e9
        etas = np.stack([fam.from_standard(-1.0, n, n, 2 * n), fam.from_standard(2.0, n, n, 0.5 * n)])
        state = state.replace(emission_eta=etas)
        Y = np.array([[0.0], [1.5], [-2.0]])
        tilted = build_tilted(state, Y)
        expect = np.column_stack([
            -0.5 * (np.log(2 * np.pi * 2.0) + (Y[:, 0] + 1) ** 2 / 2.0),
            -0.5 * (np.log(2 * np.pi * 0.5) + (Y[:, 0] - 2) ** 2 / 0.5),
        ])
        np.testing.assert_allclose(tilted.log_lik, expect, atol=1e-6)

    @pytest.mark.parametrize("variant", ["feature-independent", "feature-based", "ihmm-baseline"])
    def test_segmentation_matrix_matches_pointwise(self, variant):
        state = random_state(K=3, variant=variant, seed=5)
        Y = np.random.default_rng(5).normal(size=(6, 1))
        tilted = build_tilted(state, Y)
        for t in range(6):
            for z in range(3):
                lp, lq = segmentation_logprob(variant, state.omega, state.theta, Y[t], z)
                assert tilted.log_seg[t, z] == pytest.approx(lp, abs=1e-12)
                assert tilted.log_noseg[t, z] == pytest.approx(lq, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            build_tilted(random_state(K=2), np.zeros((3, 2)))


class TestMeanTransition:
    def test_pair_row(self):
        state = random_state(K=2, seed=6)
        conc = np.array([[1.0, 1.0, 1e-300], [2.0, 5.0, 1.0]])
        trans, _, _ = mean_transition(state.replace(trans_conc=conc))
        np.testing.assert_allclose(trans[0], [0.5, 0.5])

    def test_symmetric_rows(self):
        state = init_global(Hyperparams(K=4), SUMMARY, 0)
        trans, _, _ = mean_transition(state)
        assert np.allclose(trans, trans[0])

    def test_random_rows(self):
        state = random_state(K=4, seed=7)
        trans, init, pseg = mean_transition(state)
        c = state.trans_conc[:, :4]
        np.testing.assert_allclose(trans, c / c.sum(axis=1, keepdims=True), atol=1e-12)
        np.testing.assert_allclose(trans.sum(axis=1), 1.0, atol=1e-12)
        assert init.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(pseg, state.omega)
