import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ecglab import gbdt
from ecglab.errors import (
    CorruptModel, DegenerateLabels, FeatureCountMismatch, NoValidSplit, SchemaVersionMismatch,
)
from ecglab.evaluation import auroc
from ecglab.gbdt import Stump, StumpEnsemble, TrainConfig
from oracles import enumerate_best_stump, fd_grad_hess

EXACT = TrainConfig(lambda_l2=1.0, min_child_hessian=0.0, exact=True)


class TestGradHess:
    def test_margin_zero(self):
        assert gbdt.logistic_grad_hess(0.0, 1) == (-0.5, 0.25)
        assert gbdt.logistic_grad_hess(0.0, 0) == (0.5, 0.25)

    def test_margin_two_finite_difference(self):
        g, _ = gbdt.logistic_grad_hess(2.0, 1)
        assert abs(g - fd_grad_hess(2.0, 1)[0]) < 1e-6

    def test_random_pairs_match_finite_differences(self):
        rng = np.random.default_rng(0)
        margins = rng.uniform(-30, 30, 1000)
        labels = rng.integers(0, 2, 1000)
        g, h = gbdt.logistic_grad_hess(margins, labels)
        for m, y, gi, hi in zip(margins, labels, g, h):
            fg, fh = fd_grad_hess(m, int(y))
            assert abs(gi - fg) <= 1e-6 * abs(fg) + 1e-300
            assert abs(hi - fh) <= 1e-6 * abs(fh) + 1e-300

    def test_extreme_margins_stay_finite(self):
        g, h = gbdt.logistic_grad_hess(np.array([-800.0, 800.0]), np.array([1, 0]))
        assert np.all(np.isfinite(g)) and np.all(h >= 0)
        assert g.tolist() == [-1.0, 1.0]


class TestFitStump:
    def test_four_point_example(self):
        X = np.array([[1.0], [2.0], [3.0], [4.0]])
        y = np.array([0, 0, 1, 1])
        g, h = gbdt.logistic_grad_hess(np.zeros(4), y)
        s = gbdt.fit_stump(X, g, h, EXACT)
        assert s.threshold == 2.5 and s.feature_index == 0
        # exact arithmetic: G_L = 1, H_L = 1/2, w = -1 / (1/2 + 1)
        assert Fraction(s.left_value) == pytest.approx(Fraction(-2, 3), abs=1e-15)
        assert s.left_value == pytest.approx(-0.6667, abs=1e-4)
        assert s.right_value == pytest.approx(0.6667, abs=1e-4)
        ref = enumerate_best_stump(X, list(g), list(h), 1.0, 0.0)
        assert (ref["threshold"], ref["left_value"], ref["right_value"]) == (
            s.threshold, s.left_value, s.right_value)

    def test_zero_gradients(self):
        X = np.arange(8.0).reshape(4, 2)
        with pytest.raises(NoValidSplit):
            gbdt.fit_stump(X, np.zeros(4), np.full(4, 0.25), EXACT)

    def test_min_child_hessian_blocks_all(self):
        X = np.array([[1.0], [2.0]])
        with pytest.raises(NoValidSplit):
            gbdt.fit_stump(X, np.array([1.0, -1.0]), np.array([0.25, 0.25]),
                           TrainConfig(min_child_hessian=1.0, exact=True))

    def test_missing_direction_matches_oracle(self):
        X = np.array([[1.0], [2.0], [np.nan], [3.0], [4.0]])
        for y in ([0, 0, 1, 1, 1], [0, 0, 0, 1, 1], [1, 0, 0, 1, 1]):
            g, h = gbdt.logistic_grad_hess(np.zeros(5), np.array(y))
            s = gbdt.fit_stump(X, g, h, EXACT)
            ref = enumerate_best_stump(X, list(g), list(h), 1.0, 0.0)
            assert s.missing_goes_left == ref["missing_goes_left"]
            assert s.threshold == ref["threshold"] and s.gain == ref["gain"]

    def test_routing(self):
        s = Stump(0, 2.0, True, -1.0, 1.0)
        X = np.array([[1.999], [2.0], [np.nan]])
        assert s.leaf_values(X).tolist() == [-1.0, 1.0, -1.0]

    def test_histogram_equals_exact_with_few_distinct_values(self):
        rng = np.random.default_rng(1)
        X = rng.integers(0, 50, size=(300, 3)).astype(float)
        g, h = gbdt.logistic_grad_hess(np.zeros(300), rng.integers(0, 2, 300))
        a = gbdt.fit_stump(X, g, h, TrainConfig(max_bins=64))
        b = gbdt.fit_stump(X, g, h, TrainConfig(exact=True))
        assert a == b

    def test_histogram_caps_candidates(self):
        col = np.random.default_rng(2).normal(size=5000)
        assert gbdt.candidate_thresholds(col, max_bins=16).size <= 15
        assert gbdt.candidate_thresholds(col, exact=True).size == 4999


dyadic = st.integers(-16, 16).map(lambda k: k / 8.0)
positive_dyadic = st.integers(1, 16).map(lambda k: k / 16.0)


@settings(max_examples=150, deadline=None)
@given(data=st.data())
def test_oracle_equivalence(data):
    n = data.draw(st.integers(2, 64))
    d = data.draw(st.integers(1, 4))
    X = data.draw(hnp.arrays(np.float64, (n, d), elements=st.sampled_from(
        [0.0, 1.0, 2.0, 3.5, 7.0, 10.0, math.nan])))
    g = data.draw(st.lists(dyadic, min_size=n, max_size=n))
    h = data.draw(st.lists(positive_dyadic, min_size=n, max_size=n))
    lam = data.draw(st.sampled_from([0.0, 0.5, 1.0, 2.0]))
    mch = data.draw(st.sampled_from([0.0, 0.25, 1.0]))
    ref = enumerate_best_stump(X, g, h, lam, mch)
    config = TrainConfig(lambda_l2=lam, min_child_hessian=mch, exact=True)
    if ref is None:
        with pytest.raises(NoValidSplit):
            gbdt.fit_stump(X, np.array(g), np.array(h), config)
        return
    s = gbdt.fit_stump(X, np.array(g), np.array(h), config)
    assert s.gain == ref["gain"]
    assert (s.feature_index, s.threshold, s.missing_goes_left) == (
        ref["feature_index"], ref["threshold"], ref["missing_goes_left"])
    assert (s.left_value, s.right_value) == (ref["left_value"], ref["right_value"])


def separable(n=500, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = (X[:, 1] > 0.2).astype(int)
    return X, y


class TestTrain:
    def test_separable(self):
        X, y = separable()
        Xv, yv = separable(seed=1)
        m = gbdt.train((X, y), (Xv, yv), TrainConfig(num_rounds=50))
        assert len(m.stumps) <= 50
        assert auroc(m.predict_margin(X), y) >= 0.99

    def test_null_labels(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(2000, 5))
        y = rng.integers(0, 2, 2000)
        Xv = rng.normal(size=(500, 5))
        yv = rng.integers(0, 2, 500)
        m = gbdt.train((X, y), (Xv, yv))
        assert 0.40 <= auroc(m.predict_margin(Xv), yv) <= 0.60

    def test_degenerate(self):
        X, _ = separable()
        with pytest.raises(DegenerateLabels):
            gbdt.train((X, np.ones(500)), separable(seed=1))
        with pytest.raises(DegenerateLabels):
            gbdt.train(separable(), (X, np.zeros(500)))

    def test_base_score_and_truncation(self):
        X, y = separable()
        m = gbdt.train((X, y), separable(seed=1), TrainConfig(num_rounds=30, early_stopping_rounds=5))
        assert m.base_score == pytest.approx(math.log(y.mean() / (1 - y.mean())))
        best = max(range(len(m.history)), key=lambda i: (m.history[i]["val_auroc"], -i))
        assert len(m.stumps) == best + 1

    def test_monotone_train_loss(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(800, 4))
        X[rng.random(X.shape) < 0.1] = np.nan
        y = (np.nan_to_num(X[:, 0]) + rng.normal(size=800) > 0).astype(int)
        m = gbdt.train((X, y), (X, y), TrainConfig(num_rounds=100, early_stopping_rounds=None))
        losses = [gbdt.logistic_loss(np.full(800, m.base_score), y)] + [
            r["train_logloss"] for r in m.history]
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert all(s.gain >= 0 for s in m.stumps)

    def test_deterministic(self):
        X, y = separable(seed=4)
        c = TrainConfig(num_rounds=40)
        a = gbdt.dumps_model(gbdt.train((X, y), separable(seed=5), c))
        b = gbdt.dumps_model(gbdt.train((X, y), separable(seed=5), c))
        assert a == b

    def test_digest_tracks_config(self):
        assert TrainConfig().digest() == TrainConfig().digest()
        assert TrainConfig().digest() != TrainConfig(lambda_l2=2.0).digest()

    def test_invalid_config(self):
        for kw in ({"num_rounds": 0}, {"learning_rate": 0.0}, {"lambda_l2": -1}, {"max_bins": 1}):
            with pytest.raises(ValueError):
                TrainConfig(**kw)


def toy_model(stumps=(), base=0.25, lr=0.5, d=3):
    return StumpEnsemble(base, lr, tuple(stumps), tuple(f"f{j}" for j in range(d)), "sha256:0")


class TestPredict:
    def test_empty_ensemble(self):
        m = toy_model()
        assert m.predict_proba([0.0, 0.0, 0.0]) == pytest.approx(1 / (1 + math.exp(-0.25)))

    def test_single_stump_right(self):
        m = toy_model([Stump(1, 0.0, True, -2.0, 3.0)])
        assert m.predict_margin([9.0, 1.0, None]) == 0.25 + 0.5 * 3.0
        assert m.predict_margin([9.0, None, 1.0]) == 0.25 + 0.5 * -2.0

    def test_feature_count_mismatch(self):
        with pytest.raises(FeatureCountMismatch):
            toy_model().predict_margin([1.0, 2.0])

    def test_batch_equals_rows(self):
        rng = np.random.default_rng(0)
        stumps = [Stump(int(rng.integers(3)), float(rng.normal()), bool(rng.integers(2)),
                        float(rng.normal()), float(rng.normal())) for _ in range(25)]
        m = toy_model(stumps)
        X = rng.normal(size=(200, 3))
        X[rng.random(X.shape) < 0.2] = np.nan
        batch = m.predict_margin(X)
        assert all(batch[i] == m.predict_margin(X[i]) for i in range(200))
        p = m.predict_proba(X)
        assert np.all((p > 0) & (p < 1))

    @given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
    def test_shrinkage_scaling(self, lr, c):
        lr2 = lr * c
        if not 0 < lr2 <= 1:
            return
        stumps = [Stump(0, 0.5, False, 0.75, -1.25), Stump(2, -1.0, True, 2.0, 0.5)]
        X = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, -2.0], [np.nan, 0, np.nan]])
        a = toy_model(stumps, lr=lr)
        b = toy_model(stumps, lr=lr2)
        np.testing.assert_allclose(
            b.predict_margin(X) - b.base_score, c * (a.predict_margin(X) - a.base_score), rtol=1e-12)
        assert np.array_equal(a.leaf_sum(X), b.leaf_sum(X))


class TestPersistence:
    def test_round_trip_200_stumps(self, tmp_path):
        rng = np.random.default_rng(9)
        stumps = [Stump(int(rng.integers(15)), float(rng.normal()), bool(rng.integers(2)),
                        float(rng.normal()) / 3, float(rng.normal()) / 7, float(rng.random()))
                  for _ in range(200)]
        m = StumpEnsemble(-1.1 / 3, 0.1, tuple(stumps), tuple(f"x{j}" for j in range(15)), "sha256:ab")
        gbdt.save_model(m, tmp_path / "m.model")
        back = gbdt.load_model(tmp_path / "m.model")
        X = rng.normal(size=(1000, 15))
        X[rng.random(X.shape) < 0.1] = np.nan
        assert np.array_equal(m.predict_margin(X), back.predict_margin(X))
        assert back == m
        assert gbdt.dumps_model(back) == (tmp_path / "m.model").read_text()

    def test_truncated(self, tmp_path):
        text = gbdt.dumps_model(toy_model([Stump(0, 1.0, True, 1.0, 2.0, 0.5)] * 3))
        for cut in (len(text) // 2, len(text) - 5, 30):
            with pytest.raises(CorruptModel):
                gbdt.loads_model(text[:cut])
        with pytest.raises(CorruptModel):
            gbdt.loads_model("")

    def test_empty_ensemble(self):
        m = toy_model(base=-0.1)
        back = gbdt.loads_model(gbdt.dumps_model(m))
        assert back.base_score == -0.1 and back.stumps == ()

    def test_schema_mismatch(self):
        text = gbdt.dumps_model(toy_model()).replace("schema_version 1", "schema_version 2")
        with pytest.raises(SchemaVersionMismatch):
            gbdt.loads_model(text)

    def test_format_header(self):
        text = gbdt.dumps_model(toy_model([Stump(2, 0.5, False, -1.0, 1.0, 0.25)]))
        assert text.splitlines() == [
            "ecglab-stump-ensemble",
            "schema_version 1",
            'feature_names ["f0", "f1", "f2"]',
            "base_score 0x1.0000000000000p-2",
            "learning_rate 0x1.0000000000000p-1",
            "training_config_digest sha256:0",
            "n_stumps 1",
            "2 0x1.0000000000000p-1 R -0x1.0000000000000p+0 0x1.0000000000000p+0 0x1.0000000000000p-2",
            "end",
        ]
        assert text.endswith("end\n")
