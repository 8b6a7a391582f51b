import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latexplain.surrogate import (
    DecisionTree,
    SplitCondition,
    TreeConfig,
    canonicalize,
    extract_counterfactuals,
    extract_rule,
    fit_tree,
    is_satisfiable,
    predict,
    predict_batch,
    satisfies_batch,
)
from oracles import brute_cart, brute_counterfactuals, brute_predict, random_tree_json, walk


def nested(tree: DecisionTree, node=0):
    if tree.is_leaf(node):
        return {"label": tree.label[node]}
    return {"feature": tree.feature[node], "threshold": tree.threshold[node],
            "left": nested(tree, tree.left[node]), "right": nested(tree, tree.right[node])}


def hand_tree():
    # f0 <= .5 ? (f1 <= .2 ? 0 : 1) : (f0 <= .8 ? (f1 <= .6 ? 2 : 0) : 1)
    return DecisionTree.from_json({"num_classes": 3, "nodes": [
        {"feature": 0, "threshold": 0.5, "left": 1, "right": 4},
        {"feature": 1, "threshold": 0.2, "left": 2, "right": 3},
        {"label": 0, "counts": [1, 0, 0]},
        {"label": 1, "counts": [0, 1, 0]},
        {"feature": 0, "threshold": 0.8, "left": 5, "right": 8},
        {"feature": 1, "threshold": 0.6, "left": 6, "right": 7},
        {"label": 2, "counts": [0, 0, 1]},
        {"label": 0, "counts": [1, 0, 0]},
        {"label": 1, "counts": [0, 1, 0]},
    ]})


def C(f, op, t):
    return SplitCondition(f, op, t)


def test_one_feature_forced_split():
    tree = fit_tree([[0.0], [1.0], [2.0], [3.0]], [0, 0, 1, 1], TreeConfig(min_leaf=1))
    assert tree.feature[0] == 0 and tree.threshold[0] == 1.5
    assert [predict(tree, [v]) for v in (0.4, 1.5, 1.6)] == [0, 0, 1]


def test_pure_node_is_a_leaf():
    tree = fit_tree(np.random.default_rng(0).random((10, 3)), [4] * 10)
    assert tree.n_nodes == 1 and tree.label[0] == 4 and tree.degenerate


def test_depth_zero_predicts_majority_with_low_tie():
    tree = fit_tree([[0.0], [1.0], [2.0], [3.0]], [2, 1, 2, 1], TreeConfig(max_depth=0))
    assert tree.n_nodes == 1 and tree.label[0] == 1


def test_min_leaf_respected():
    rng = np.random.default_rng(1)
    X, y = rng.random((60, 2)), rng.integers(0, 3, 60)
    tree = fit_tree(X, y, TreeConfig(max_depth=8, min_leaf=5))
    for leaf in tree.leaves:
        assert sum(tree.counts[leaf]) >= 5
    assert tree.depth <= 8


@pytest.mark.parametrize("seed", range(20))
def test_matches_exhaustive_cart(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.random((20, 2)), 2)
    y = rng.integers(0, 3, 20)
    tree = fit_tree(X, y, TreeConfig(max_depth=4, min_leaf=2), num_classes=3)
    ref = brute_cart(X.tolist(), y.tolist(), 4, 2, 3)
    assert nested(tree) == ref
    probes = rng.random((200, 2))
    assert predict_batch(tree, probes).tolist() == [brute_predict(ref, p) for p in probes]


def test_threshold_routing_is_inclusive_left():
    tree = hand_tree()
    assert predict(tree, [0.5, 0.0]) == 0  # 0.5 <= 0.5 goes left
    assert predict(tree, [0.5000001, 0.0]) == 2


def test_batch_and_recursive_walkers_agree():
    rng = random.Random(3)
    for _ in range(20):
        doc = random_tree_json(rng, 4, 30, 5)
        tree = DecisionTree.from_json(doc)
        pts = np.random.default_rng(rng.randrange(10**6)).normal(size=(1000, 4))
        expected = [walk(doc, p) for p in pts]
        assert predict_batch(tree, pts).tolist() == expected
        assert [predict(tree, p) for p in pts[:50]] == expected[:50]


def test_json_round_trip():
    tree = fit_tree(np.random.default_rng(2).random((40, 3)), np.arange(40) % 4)
    again = DecisionTree.from_json(tree.to_json())
    assert again.to_json() == tree.to_json()


def test_hand_rule_and_counterfactuals():
    tree = hand_tree()
    z = np.array([0.3, 0.9])
    rule = extract_rule(tree, z)
    assert rule.label == 1
    assert rule.premise == [C(0, "<=", 0.5), C(1, ">", 0.2)]
    cfs = extract_counterfactuals(tree, z, rule)
    assert {(tuple(c.premise), c.label) for c in cfs} == {
        ((C(0, "<=", 0.5), C(1, "<=", 0.2)), 0),
        ((C(0, ">", 0.5), C(0, "<=", 0.8), C(1, ">", 0.6)), 0),
    }
    assert all(c.falsified_count == 1 for c in cfs)


def test_rule_holds_at_its_own_point_and_predicts():
    rng = random.Random(4)
    for _ in range(100):
        doc = random_tree_json(rng, 3, 20, 4)
        tree = DecisionTree.from_json(doc)
        z = np.array([rng.uniform(-3, 3) for _ in range(3)])
        rule = extract_rule(tree, z)
        assert rule.holds(z)
        assert rule.label == walk(doc, z)
        assert is_satisfiable(rule.premise, 3)
        feats = [c.feature for c in rule.premise]
        assert feats == sorted(feats)


def test_counterfactuals_sound_and_minimal_against_enumeration():
    rng = random.Random(5)
    for _ in range(500):
        doc = random_tree_json(rng, 3, 16, 3)
        tree = DecisionTree.from_json(doc)
        z = np.array([rng.uniform(-2.5, 2.5) for _ in range(3)])
        rule = extract_rule(tree, z)
        cfs = extract_counterfactuals(tree, z, rule)
        best, expected = brute_counterfactuals(doc, z, rule.label)
        got = {(frozenset((c.feature, c.op, c.threshold) for c in cf.premise), cf.label) for cf in cfs}
        assert got == {(frozenset(p), lab) for p, lab in expected}
        for cf in cfs:
            assert cf.label != rule.label
            assert cf.falsified_count == best
            assert is_satisfiable(cf.premise, 3)


def test_canonicalize_keeps_tightest_bounds():
    conds = [C(1, ">", 0.0), C(0, "<=", 2.0), C(1, ">", 0.5), C(0, "<=", 1.0), C(1, "<=", 3.0)]
    assert canonicalize(conds) == [C(0, "<=", 1.0), C(1, ">", 0.5), C(1, "<=", 3.0)]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_tree_training_accuracy_at_least_majority(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(80, 3))
    y = (X[:, 0] + 0.3 * rng.normal(size=80) > 0).astype(int) + (X[:, 1] > 1)
    deep = fit_tree(X, y, TreeConfig(max_depth=8, min_leaf=2))
    flat = fit_tree(X, y, TreeConfig(max_depth=0))
    acc = lambda t: np.mean(predict_batch(t, X) == y)
    assert acc(deep) >= acc(flat)
    assert np.array_equal(satisfies_batch([C(0, ">", 0.0)], X), X[:, 0] > 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TreeConfig(min_leaf=0)
    with pytest.raises(ValueError):
        fit_tree(np.zeros((0, 2)), [])
