import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from policyforge.data import Dataset, Truth
from policyforge.drlearner import ScoreSet
from policyforge.policy import (
    PolicyTree,
    advantage,
    cross_validated_tree_value,
    fit_policy_tree,
    plugin_policy,
    true_policy_value,
)


def _tree_value(tree, x, s):
    return float(np.mean((2.0 * tree.predict(x) - 1.0) * s))


def _brute_tree_value(x, s):
    """Best depth-<=2 tree by enumerating every root and every child split."""
    n, p = x.shape
    splits = [(j, t) for j in range(p) for t in np.unique(x[:, j])]

    def best_depth1(rows):
        best = abs(s[rows].sum())
        for j, t in splits:
            go = x[rows, j] <= t
            best = max(best, abs(s[rows][go].sum()) + abs(s[rows][~go].sum()))
        return best

    best = best_depth1(np.arange(n))
    for j, t in splits:
        go = x[:, j] <= t
        best = max(best, best_depth1(np.flatnonzero(go)) + best_depth1(np.flatnonzero(~go)))
    return best / n


def _brute_assignment_value(x, s):
    """Best value over every assignment some depth-2 tree can produce."""
    n, p = x.shape
    splits = [(j, t) for j in range(p) for t in np.unique(x[:, j])]
    masks = [x[:, j] <= t for j, t in splits]
    seen = set()
    best = -np.inf
    for r, a, b in itertools.product(range(len(splits)), repeat=3):
        root = masks[r]
        cells = (root & masks[a], root & ~masks[a], ~root & masks[b], ~root & ~masks[b])
        for acts in itertools.product((0, 1), repeat=4):
            pi = np.zeros(n, dtype=int)
            for cell, act in zip(cells, acts):
                pi[cell] = act
            key = pi.tobytes()
            if key in seen:
                continue
            seen.add(key)
            best = max(best, float(np.mean((2 * pi - 1) * s)))
    return best


def _instance(rng):
    n = int(rng.integers(2, 13))
    p = int(rng.integers(1, 4))
    # a mix of continuous and coarse features so ties in x occur
    x = np.where(rng.random((n, p)) < 0.5, rng.normal(size=(n, p)), rng.integers(0, 3, (n, p)))
    s = rng.normal(size=n)
    return x, s


def test_matches_brute_force_on_1000_instances():
    rng = np.random.default_rng(20240101)
    for _ in range(1000):
        x, s = _instance(rng)
        tree = fit_policy_tree(x, s, depth=2, split_budget=None)
        assert _tree_value(tree, x, s) == pytest.approx(_brute_tree_value(x, s), abs=1e-12)


def test_matches_assignment_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(60):
        x, s = _instance(rng)
        if x.shape[0] > 8:
            x, s = x[:8], s[:8]
        tree = fit_policy_tree(x, s, depth=2, split_budget=None)
        assert _tree_value(tree, x, s) == pytest.approx(_brute_assignment_value(x, s), abs=1e-12)


def test_depth1_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(200):
        x, s = _instance(rng)
        tree = fit_policy_tree(x, s, depth=1, split_budget=None)
        best = abs(s.sum())
        for j in range(x.shape[1]):
            for t in np.unique(x[:, j]):
                go = x[:, j] <= t
                best = max(best, abs(s[go].sum()) + abs(s[~go].sum()))
        assert _tree_value(tree, x, s) == pytest.approx(best / s.size, abs=1e-12)
        assert tree.depth <= 1


def test_depth3_at_least_depth2():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x, s = _instance(rng)
        v2 = _tree_value(fit_policy_tree(x, s, depth=2, split_budget=None), x, s)
        v3 = _tree_value(fit_policy_tree(x, s, depth=3, split_budget=None), x, s)
        assert v3 >= v2 - 1e-12


def test_all_positive_scores_treat_everyone():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 3))
    s = rng.uniform(0.1, 1.0, 50)
    tree = fit_policy_tree(x, s)
    assert np.all(tree.predict(x) == 1)
    assert _tree_value(tree, x, s) == pytest.approx(s.mean())


def test_separable_scores():
    x = np.linspace(-1, 1, 21)[:, None]
    x = np.hstack([x, np.random.default_rng(0).normal(size=(21, 1))])
    s = np.where(x[:, 0] <= 0, 1.0, -1.0)
    tree = fit_policy_tree(x, s, depth=1)
    assert tree.root.feature == 0
    assert -0.1 <= tree.root.threshold < 0.1
    assert (tree.root.left.action, tree.root.right.action) == (1, 0)
    assert _tree_value(tree, x, s) == 1.0


def test_harmful_flip_equivalent_to_negation():
    rng = np.random.default_rng(2)
    x, s = rng.normal(size=(40, 2)), rng.normal(size=40)
    a = fit_policy_tree(x, s, harmful=True)
    b = fit_policy_tree(x, -s, harmful=False)
    assert a.to_dict() == b.to_dict()


def test_split_budget_caps_candidates_but_stays_close():
    rng = np.random.default_rng(4)
    x, s = rng.normal(size=(2000, 3)), rng.normal(size=2000) + (rng.normal(size=2000) > 0)
    exact = _tree_value(fit_policy_tree(x, s, split_budget=None), x, s)
    capped = _tree_value(fit_policy_tree(x, s, split_budget=32), x, s)
    assert capped <= exact + 1e-12
    assert capped > 0.9 * exact


def test_feature_restriction():
    rng = np.random.default_rng(8)
    x, s = rng.normal(size=(100, 3)), rng.normal(size=100)
    tree = fit_policy_tree(x, s, features=[1])
    d = tree.to_dict()["tree"]

    def feats(node):
        if "action" in node:
            return set()
        return {node["feature"]} | feats(node["left"]) | feats(node["right"])

    assert feats(d) <= {1}
    with pytest.raises(ValueError):
        fit_policy_tree(x, s, features=[5])


def test_tree_json_round_trip():
    rng = np.random.default_rng(9)
    x, s = rng.normal(size=(60, 2)), rng.normal(size=60)
    tree = fit_policy_tree(x, s, feature_names=("a", "b"))
    back = PolicyTree.from_dict(tree.to_dict(), ("a", "b"))
    assert_array_equal(back.predict(x), tree.predict(x))
    assert back.to_dict() == tree.to_dict()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), power=st.integers(-20, 20))
def test_argmax_scale_invariance(seed, power):
    rng = np.random.default_rng(seed)
    x, s = rng.normal(size=(30, 2)), rng.normal(size=30)
    c = 2.0**power
    a, b = fit_policy_tree(x, s), fit_policy_tree(x, c * s)
    assert a.to_dict() == b.to_dict()
    assert _tree_value(b, x, c * s) == pytest.approx(c * _tree_value(a, x, s))


@pytest.mark.parametrize("c", [0.37, 3.1, 1e4])
def test_scale_invariance_generic_constant(c):
    rng = np.random.default_rng(12)
    x, s = rng.normal(size=(200, 3)), rng.normal(size=200)
    assert_array_equal(fit_policy_tree(x, s).predict(x), fit_policy_tree(x, c * s).predict(x))


def test_advantage_examples():
    assert advantage(np.ones(2, int), [0.1, -0.1], False).value == pytest.approx(0.0)
    assert advantage(np.array([1, 0]), [2.0, 4.0], False).value == -1.0
    s = np.array([0.3, -0.2, 0.5])
    est = advantage(np.ones(3, int), s, True)
    assert est.value == pytest.approx(-s.mean())
    assert est.se == pytest.approx(np.std(-s, ddof=1) / np.sqrt(3))


@settings(max_examples=200, deadline=None)
@given(
    s=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40),
    seed=st.integers(0, 2**32 - 1),
    harmful=st.booleans(),
)
def test_advantage_antisymmetry(s, seed, harmful):
    s = np.asarray(s)
    pi = np.random.default_rng(seed).integers(0, 2, s.size)
    assert advantage(pi, s, harmful).value == pytest.approx(-advantage(1 - pi, s, harmful).value, abs=1e-9)


@given(s=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40))
def test_treat_all_equals_signed_mean(s):
    s = np.asarray(s)
    assert advantage(np.ones(s.size, int), s, True).value == float(np.mean(-s))


def test_plugin_rules():
    assert_array_equal(plugin_policy([-0.2, 0.1], True).action, [1, 0])
    assert_array_equal(plugin_policy([0.0, 0.0], True).action, [0, 0])
    assert_array_equal(plugin_policy([0.0, 0.3], False).action, [0, 1])
    tau = np.random.default_rng(0).normal(size=50)
    truth = Truth(tau=tau, e=np.full(50, 0.5))
    assert_array_equal(plugin_policy(tau, True).action, truth.oracle_action)


def test_true_policy_value():
    rng = np.random.default_rng(10)
    tau = rng.normal(size=10)
    truth = Truth(tau=tau, e=np.full(10, 0.5))
    assert true_policy_value(truth.oracle_action, truth) == pytest.approx(np.mean(np.abs(tau)))
    assert true_policy_value(1 - truth.oracle_action, truth) == pytest.approx(-np.mean(np.abs(tau)))
    pi = rng.integers(0, 2, 10)
    hand = sum((2 * pi[i] - 1) * (-tau[i]) for i in range(10)) / 10
    assert true_policy_value(pi, truth) == pytest.approx(hand)
    with pytest.raises(ValueError):
        true_policy_value(pi, None)


def _dataset(n=80, p=3, seed=0, harmful=False):
    rng = np.random.default_rng(seed)
    return Dataset(x=rng.normal(size=(n, p)), w=rng.integers(0, 2, n), y=rng.integers(0, 2, n), harmful=harmful)


def test_cv_constant_scores_treat_everyone():
    ds = _dataset()
    c = 0.7
    scores = ScoreSet.build(np.full(ds.n, c), np.full(ds.n, c), "DR")
    for train_on in ("gamma", "tau_hat"):
        cv = cross_validated_tree_value(ds, scores, train_on=train_on, stream=3)
        assert np.all(cv.assignment.action == 1)
        assert cv.adv_dr.value == pytest.approx(c)
        assert cv.adv_cate.value == pytest.approx(c)


def test_cv_trees_never_see_their_fold():
    ds = _dataset(n=120, seed=4)
    rng = np.random.default_rng(5)
    scores = ScoreSet.build(rng.normal(size=ds.n), rng.normal(size=ds.n), "DR")
    cv = cross_validated_tree_value(ds, scores, train_on="gamma", k=4, stream=11)
    for f, tree in enumerate(cv.trees):
        test = cv.fold_of == f
        # the fold tree is exactly the tree fit on the complement
        ref = fit_policy_tree(ds.x[~test], scores.gamma[~test], harmful=ds.harmful, feature_names=ds.covariate_names)
        assert tree.to_dict() == ref.to_dict()
        assert_array_equal(cv.assignment.action[test], tree.predict(ds.x[test]))
        # perturbing the fold's own scores leaves its tree unchanged
        g = scores.gamma.copy()
        g[test] += rng.normal(size=test.sum()) * 100
        other = cross_validated_tree_value(ds, ScoreSet.build(g, scores.tau_hat, "DR"), k=4, stream=11)
        assert other.trees[f].to_dict() == tree.to_dict()


def test_cv_fold_and_pooled_means():
    ds = _dataset(n=100, seed=6, harmful=True)
    rng = np.random.default_rng(1)
    scores = ScoreSet.build(rng.normal(size=ds.n), rng.normal(size=ds.n), "DR")
    cv = cross_validated_tree_value(ds, scores, train_on="tau_hat", stream=2)
    a = cv.assignment.action
    fold_vals = [advantage(a[cv.fold_of == f], scores.gamma[cv.fold_of == f], True).value for f in range(4)]
    assert cv.adv_dr.value == pytest.approx(np.mean(fold_vals))
    assert cv.pooled_dr.value == pytest.approx(advantage(a, scores.gamma, True).value)
    assert cv.assignment.source == "modified_tree"


def test_cv_rejects_single_fold():
    ds = _dataset()
    scores = ScoreSet.build(np.zeros(ds.n), np.zeros(ds.n), "DR")
    with pytest.raises(ValueError):
        cross_validated_tree_value(ds, scores, k=1)
