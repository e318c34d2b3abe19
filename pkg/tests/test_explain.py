import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecglab import explain, gbdt
from ecglab.errors import EmptyBackground, InsufficientData
from ecglab.gbdt import Stump, StumpEnsemble, TrainConfig
from oracles import brute_force_shapley


def model(stumps, d=3, base=0.3, lr=0.1):
    return StumpEnsemble(base, lr, tuple(stumps), tuple(f"f{j}" for j in range(d)), "sha256:0")


def test_single_stump_closed_form():
    m = model([Stump(1, 0.0, True, -2.0, 4.0)])
    background = np.array([[0, -1, 0], [0, 1, 0], [0, -5, 0], [0, 5, 0]], dtype=float)
    a = explain.shap_values(m, [0.0, 3.0, 0.0], background)
    assert a.contributions[1] == pytest.approx(0.1 * (4.0 - (4.0 - 2.0) / 2))
    assert a.contributions[0] == 0 and a.contributions[2] == 0


def test_empty_ensemble():
    a = explain.shap_values(model([]), [1.0, 2.0, 3.0], np.zeros((4, 3)))
    assert not a.contributions.any() and a.base_value == 0.3


def test_empty_background():
    with pytest.raises(EmptyBackground):
        explain.shap_values(model([]), [1.0, 2.0, 3.0], np.zeros((0, 3)))


def test_three_stumps_two_features_brute_force():
    m = model([Stump(0, 0.5, True, -1.0, 2.0), Stump(1, 1.5, False, 0.25, -0.75),
               Stump(0, -0.5, False, 3.0, 1.0)], d=2)
    rng = np.random.default_rng(0)
    background = rng.normal(size=(8, 2))
    background[2, 0] = np.nan
    for x in ([0.7, 2.0], [np.nan, 0.0], [-1.0, np.nan]):
        a = explain.shap_values(m, x, background)
        phi, v0 = brute_force_shapley(m.predict_margin, x, background)
        np.testing.assert_allclose(a.contributions, phi, atol=1e-9, rtol=0)
        assert abs(a.base_value - v0) <= 1e-9


random_stump = st.builds(
    Stump,
    feature_index=st.integers(0, 3),
    threshold=st.floats(-2, 2),
    missing_goes_left=st.booleans(),
    left_value=st.floats(-3, 3),
    right_value=st.floats(-3, 3),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(random_stump, max_size=12), st.integers(0, 2**31))
def test_oracle_efficiency_and_null_player(stumps, seed):
    m = model(stumps, d=4)
    rng = np.random.default_rng(seed)
    background = rng.normal(size=(6, 4))
    X = rng.normal(size=(3, 4))
    X[rng.random(X.shape) < 0.25] = np.nan
    contrib, base = explain.shap_matrix(m, X, background)
    margins = m.predict_margin(X)
    assert np.all(np.abs(base + contrib.sum(axis=1) - margins) <= 1e-9)
    used = {s.feature_index for s in stumps}
    for j in set(range(4)) - used:
        assert np.all(contrib[:, j] == 0)
    phi, v0 = brute_force_shapley(m.predict_margin, X[0], background)
    np.testing.assert_allclose(contrib[0], phi, atol=1e-9, rtol=0)


def test_twin_symmetry():
    m = model([Stump(0, 1.0, True, -1.0, 1.5), Stump(1, 1.0, True, -1.0, 1.5)])
    rng = np.random.default_rng(4)
    col = rng.normal(size=(50, 1))
    X = np.hstack([col, col, rng.normal(size=(50, 1))])
    contrib, _ = explain.shap_matrix(m, X, X)
    assert np.array_equal(contrib[:, 0], contrib[:, 1])


class TestGlobal:
    def test_unused_feature_zero_and_single_stump(self):
        m = model([Stump(2, 0.0, True, -1.0, 1.0)])
        X = np.random.default_rng(0).normal(size=(40, 3))
        gi = explain.global_importance(m, X)
        assert np.count_nonzero(gi.values) == 1 and gi.values[2] > 0
        assert gi.ranking[0] == "f2" and all(v >= 0 for v in gi.values)
        assert [v for _, v in gi.as_rows()] == sorted(gi.values, reverse=True)

    def test_driving_feature_ranks_first(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(1500, 6))
        y = (X[:, 3] + 0.3 * rng.normal(size=1500) > 0).astype(int)
        m = gbdt.train((X[:1000], y[:1000]), (X[1000:], y[1000:]), TrainConfig(num_rounds=60))
        gi = explain.global_importance(m, X)
        assert gi.ranking[0] == "f3"
        assert explain.global_importance(m, X).values.tolist() == gi.values.tolist()


class TestDirectionality:
    def test_monotone(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(3000, 2))
        y = (rng.random(3000) < 1 / (1 + np.exp(-2 * X[:, 0]))).astype(int)
        m = gbdt.train((X[:2000], y[:2000]), (X[2000:], y[2000:]))
        summary = explain.directionality_report(m, X, "f0")
        means = [q.mean_contribution for q in summary]
        assert len(summary) == 4
        assert all(b > a for a, b in zip(means, means[1:]))
        assert sum(q.n for q in summary) == 3000

    def test_constant_feature(self):
        m = model([Stump(0, 1.0, True, -1.0, 1.0)])
        X = np.zeros((20, 3))
        X[:, 0] = 5.0
        summary = explain.directionality_report(m, X, "f0")
        assert len(summary) == 1 and summary[0].n == 20
        assert np.isfinite(summary[0].mean_contribution)

    def test_all_missing(self):
        X = np.zeros((30, 3))
        X[:, 1] = np.nan
        with pytest.raises(InsufficientData):
            explain.directionality_report(model([]), X, "f1")


def test_background_sampling_is_seeded():
    X = np.arange(5000.0).reshape(2500, 2)
    a = explain.sample_background(X, n=100, seed=3)
    assert a.shape == (100, 2)
    assert np.array_equal(a, explain.sample_background(X, n=100, seed=3))
    assert explain.sample_background(X[:50], n=100).shape == (50, 2)
