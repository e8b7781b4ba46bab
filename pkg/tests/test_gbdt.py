import numpy as np
import pytest

from plansel import gbdt
from plansel.gbdt import BoostConfig, best_split, boost_fit, fit_tree, grad_hess

from oracles import brute_force_split


class TestObjectives:
    def test_squared(self):
        g, h = grad_hess("squared", [1.0], [3.0])
        assert g.tolist() == [2.0] and h.tolist() == [1.0]

    def test_logistic(self):
        g, h = grad_hess("logistic", [1.0], [0.0])
        assert g.tolist() == [-0.5] and h.tolist() == [0.25]
        with pytest.raises(ValueError):
            grad_hess("logistic", [0.5], [0.0])

    def test_softmax(self):
        g, h = grad_hess("softmax", [0], np.zeros((1, 4)))
        assert np.allclose(g, [[-0.75, 0.25, 0.25, 0.25]]) and np.allclose(h, 0.1875)

    def test_logistic_loss_stable(self):
        assert np.isfinite(gbdt.objective_loss("logistic", [1.0, 0.0], [-800.0, 800.0]))


class TestTree:
    def test_depth_zero_leaf(self):
        t = fit_tree(np.ones((3, 1)), [-1.0, -2.0, -3.0], [1.0, 1.0, 1.0], max_depth=0, reg_lambda=0.0)
        assert t.num_leaves == 1 and t.value[0] == 2.0

    def test_zero_gradient(self, rng):
        t = fit_tree(rng.normal(size=(10, 3)), np.zeros(10), np.ones(10))
        assert t.num_leaves == 1 and t.value[0] == 0.0

    def test_constant_feature_no_split(self):
        t = fit_tree(np.ones((4, 1)), [1.0, -1.0, 2.0, -2.0], np.ones(4), max_depth=3)
        assert t.num_leaves == 1

    def test_routing(self):
        t = fit_tree(np.array([[0.0], [1.0], [2.0], [3.0]]), [-1.0, -1.0, 1.0, 1.0], np.ones(4),
                     max_depth=1, reg_lambda=0.0)
        assert t.threshold[0] == 1.5
        assert t.predict(np.array([[1.49], [1.5], [-5.0]])).tolist() == [1.0, -1.0, 1.0]

    def test_monotone_transform_preserves_partition(self, rng):
        X = rng.normal(size=(40, 3))
        g, h = rng.normal(size=40), rng.random(40) + 0.5
        a = fit_tree(X, g, h, max_depth=3)
        b = fit_tree(np.exp(X), g, h, max_depth=3)
        assert np.array_equal(a.apply(X), b.apply(np.exp(X)))
        assert np.array_equal(a.value, b.value)

    def test_leaf_weights_closed_form(self, rng):
        X = rng.normal(size=(50, 2))
        g, h = rng.normal(size=50), rng.random(50) + 0.1
        t = fit_tree(X, g, h, max_depth=2, reg_lambda=0.7)
        leaves = t.apply(X)
        for leaf in np.unique(leaves):
            m = leaves == leaf
            assert abs(t.value[leaf] - (-g[m].sum() / (h[m].sum() + 0.7))) <= 1e-12


class TestBestSplit:
    def test_matches_brute_force(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            n, f = int(r.integers(2, 65)), int(r.integers(1, 5))
            X = r.integers(0, 6, size=(n, f)).astype(float)
            g = r.integers(-16, 17, n) / 16.0
            h = np.ones(n)
            rows = np.arange(n)
            got = best_split(X, g, h, rows, np.argsort(X, axis=0, kind="stable").T, 1.0, 0.0)
            assert got == brute_force_split(X, g, h, 1.0, 0.0)

    def test_gamma_blocks_split(self):
        X = np.array([[0.0], [1.0]])
        g = np.array([-1.0, 1.0])
        assert best_split(X, g, np.ones(2), np.arange(2), np.argsort(X, axis=0).T, 0.0, 0.0)[0] == 1.0
        assert best_split(X, g, np.ones(2), np.arange(2), np.argsort(X, axis=0).T, 0.0, 1.0) is None


class TestBoosting:
    def test_one_round_lr_one_is_mean(self, rng):
        y = rng.normal(size=20)
        ens = boost_fit(np.zeros((20, 1)), y, BoostConfig(rounds=1, learning_rate=1.0, reg_lambda=0.0))
        assert np.allclose(gbdt.predict(ens, np.zeros((3, 1))), y.mean(), atol=1e-12)

    def test_empty_ensemble_is_base(self):
        ens = boost_fit(np.arange(4.0)[:, None], [1.0, 2.0, 3.0, 6.0], BoostConfig(rounds=3))
        assert gbdt.predict(ens, np.zeros((1, 1)))[0] != 3.0
        assert ens.margin(np.zeros((1, 1)), rounds=0)[0] == 3.0

    def test_square_regression(self):
        x = np.linspace(-1, 1, 200)[:, None]
        y = x[:, 0] ** 2
        ens = boost_fit(x, y, BoostConfig(rounds=200, max_depth=3, learning_rate=0.1))
        rmse = np.sqrt(np.mean((gbdt.predict(ens, x) - y) ** 2))
        assert rmse < 0.05
        assert all(b <= a + 1e-12 for a, b in zip(ens.train_loss, ens.train_loss[1:]))

    def test_early_stopping(self, rng):
        X = rng.normal(size=(60, 2))
        y = X[:, 0] + rng.normal(scale=0.1, size=60)
        # validation targets are pure noise, so improvement stops quickly
        val = (rng.normal(size=(30, 2)), rng.normal(size=30))
        ens = boost_fit(X, y, BoostConfig(rounds=300, learning_rate=0.3, patience=5), val)
        assert len(ens.trees) - ens.best_round == 5 or len(ens.trees) == 300
        assert ens.valid_loss[ens.best_round] == min(ens.valid_loss)

    def test_softmax_probabilities(self, rng):
        X = rng.normal(size=(40, 3))
        y = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0)
        ens = boost_fit(X, y, BoostConfig(rounds=10, learning_rate=0.3, objective="softmax", num_class=3))
        P = gbdt.predict(ens, X)
        assert P.shape == (40, 3) and np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert np.mean(P.argmax(axis=1) == y) > 0.8

    def test_logistic(self, rng):
        X = rng.normal(size=(50, 2))
        y = (X[:, 1] > 0).astype(float)
        p = gbdt.predict(boost_fit(X, y, BoostConfig(rounds=20, learning_rate=0.5, objective="logistic")), X)
        assert np.all((p > 0) & (p < 1)) and np.mean((p > 0.5) == y) == 1.0

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            boost_fit(np.array([[np.nan]]), [1.0])

    def test_per_output(self, rng):
        X = rng.normal(size=(30, 2))
        Y = np.column_stack([X[:, 0], -X[:, 1]])
        ens = gbdt.fit_per_output(X, Y, BoostConfig(rounds=5))
        assert len(ens) == 2 and ens[0].base_score[0] == pytest.approx(X[:, 0].mean())


@pytest.mark.parametrize("objective,k", [("squared", 1), ("logistic", 1), ("softmax", 3)])
def test_serialization_round_trip(objective, k, rng):
    X = rng.normal(size=(30, 4))
    y = rng.integers(0, k, 30) if objective == "softmax" else (X[:, 0] > 0).astype(float)
    ens = boost_fit(X, y, BoostConfig(rounds=4, max_depth=2, learning_rate=0.2, objective=objective,
                                      num_class=max(k, 1) if objective == "softmax" else 1))
    back = gbdt.loads(gbdt.dumps(ens))
    assert gbdt.dumps(back) == gbdt.dumps(ens)
    assert np.array_equal(gbdt.predict(back, X), gbdt.predict(ens, X))
    with pytest.raises(ValueError):
        gbdt.loads("XXXX 1\n")
