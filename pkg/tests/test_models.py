import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperk.errors import ModelError, NumericError
from hyperk.models import (
    BoostedModel,
    ClassWeights,
    ForestModel,
    LogisticModel,
    load_model,
    predict_proba,
    save_model,
    train_boosted,
    train_forest,
    train_logistic,
)
from hyperk.models.boosting import leaf_value, weighted_log_loss
from hyperk.models.logistic import logistic_gradient, logistic_loss, sigmoid
from hyperk.models.tree import GINI, NEWTON, grow_tree
from hyperk.models.tuning import balanced_error, inner_split, select_config, tune_boosted, tune_forest

from oracles import naive_tree, numeric_gradient


def _signal(n=400, p=6, seed=0, prevalence_shift=1.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = (X[:, 0] + 0.8 * X[:, 1] + rng.normal(size=n) > prevalence_shift).astype(int)
    return X, y


def _paths(tree):
    out = {}

    def walk(node, path):
        if tree.left[node] >= 0:
            out[(int(tree.depth[node]), path)] = (int(tree.feature[node]), float(tree.threshold[node]))
            walk(tree.left[node], path + "L")
            walk(tree.right[node], path + "R")
    walk(0, "")
    return out


# ------------------------------------------------------------------ logistic

def test_zero_weights_give_half():
    m = LogisticModel(np.zeros(3), 0.0, 0.0)
    assert predict_proba(m, np.random.default_rng(0).normal(size=(5, 3))).tolist() == [0.5] * 5


@pytest.mark.parametrize("seed", range(20))
def test_logistic_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 5))
    y = rng.integers(0, 2, 30).astype(float)
    sw = ClassWeights(3.0, 0.7).sample_weights(y)
    theta = rng.normal(size=6)
    an = logistic_gradient(theta, X, y, sw, 0.1)
    fd = numeric_gradient(lambda t: logistic_loss(t, X, y, sw, 0.1), theta, eps=1e-5)
    rel = np.abs(an - fd) / np.maximum(np.abs(fd), 1e-8)
    assert rel.max() < 1e-4


def test_separable_1d():
    X = np.array([[-1.0], [1.0]] * 10)
    y = np.array([0, 1] * 10)
    m = train_logistic(X, y, l2_lambda=0.0, max_epochs=5000, tol=1e-8)
    assert m.weights[0] > 0
    assert m.trace[-1] < 0.01


def test_loss_trace_non_increasing():
    X, y = _signal()
    m = train_logistic(X, y, ClassWeights.balanced(y))
    assert all(b <= a for a, b in zip(m.trace, m.trace[1:]))
    assert len(m.weights) == X.shape[1] and np.isfinite(m.weights).all()


def test_logistic_divergence_raises():
    X = np.array([[1e308], [-1e308]])
    with pytest.raises(NumericError, match="epoch"):
        train_logistic(X, np.array([1, 0]), l2_lambda=0.0)


def test_balanced_weights():
    cw = ClassWeights.balanced([1, 0, 0, 0])
    assert (cw.weight_pos, cw.weight_neg) == (2.0, 4 / 6)
    with pytest.raises(ModelError):
        ClassWeights.balanced([0, 0])


# ------------------------------------------------------------------ trees

def test_stump_recovers_threshold():
    x = np.array([0.1, 0.4, 0.9, 1.3, 2.0, 2.2, 3.5])
    y = (x > 1.0).astype(int)
    # seed 0 keeps both boundary points in the bootstrap sample
    f = train_forest(x[:, None], y, n_estimators=1, max_depth=1, seed=0)
    t = f.trees[0]
    assert t.feature[0] == 0
    assert t.threshold[0] == pytest.approx(1.1)
    assert ((predict_proba(f, x[:, None]) > 0.5) == y.astype(bool)).all()


def test_exhaustive_split_oracle_gini_single_feature():
    x = np.array([0.1, 0.4, 0.9, 1.3, 2.0, 2.2, 3.5])
    y = (x > 1.0).astype(float)
    w = np.ones_like(x)
    tree = grow_tree(x[:, None], np.vstack([w * y, w]), w, 1, GINI, lambda S: S[0] / S[1], 1e-12)
    assert tree.threshold[0] == pytest.approx((0.9 + 1.3) / 2)
    assert tree.value[tree.left[0]] == 0.0 and tree.value[tree.right[0]] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["gini", "newton"]), st.integers(1, 4))
def test_grow_tree_matches_naive_oracle(seed, crit, depth):
    rng = np.random.default_rng(seed)
    n, p = 40, 3
    X = np.round(rng.normal(size=(n, p)), 2)
    y = (X[:, 0] + rng.normal(size=n) > 0.3).astype(float)
    w = rng.integers(0, 3, n).astype(float) * np.where(y == 1, 2.0, 1.0)
    if crit == "gini":
        s0, s1 = w * y, w
        tree = grow_tree(X, np.vstack([s0, s1]), w, depth, GINI, lambda S: S[0] / S[1], 1e-12)
        splits, predict = naive_tree(X, s0, s1, w, depth, "gini", min_gain=1e-12)
    else:
        margin = rng.normal(size=n)
        pr = sigmoid(margin)
        s0, s1 = w * (pr - y), w * pr * (1 - pr)
        tree = grow_tree(X, np.vstack([s0, s1]), w, depth, NEWTON, lambda S: -S[0] / (S[1] + 1.0), 1e-10,
                         lam=1.0, min_child=0.1)
        splits, predict = naive_tree(X, s0, s1, w, depth, "newton", lam=1.0, min_child=0.1, min_gain=1e-10)
    got = _paths(tree)
    assert got.keys() == splits.keys()
    for k in got:
        assert got[k][0] == splits[k][0]
        assert got[k][1] == pytest.approx(splits[k][1], abs=1e-12)
    np.testing.assert_allclose(tree.predict(X), [predict(x) for x in X], rtol=1e-9, atol=1e-12)
    tree.check()


def test_forest_cover_consistency_and_truncation():
    X, y = _signal(300)
    cw = ClassWeights.balanced(y)
    deep = train_forest(X, y, cw, n_estimators=15, max_depth=6, seed=11)
    shallow = train_forest(X, y, cw, n_estimators=15, max_depth=3, seed=11)
    for t in deep.trees:
        t.check()
    cut = deep.truncated(15, 3)
    for a, b in zip(cut.trees, shallow.trees):
        for field in ("feature", "threshold", "left", "right", "value", "cover"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    np.testing.assert_array_equal(deep.predict_proba(X, max_depth=3), shallow.predict_proba(X))


def test_forest_probability_is_mean_of_trees():
    X, y = _signal(200)
    f = train_forest(X, y, n_estimators=7, max_depth=4, seed=2)
    trees = np.array([t.predict(X) for t in f.trees])
    np.testing.assert_array_equal(predict_proba(f, X), trees.sum(axis=0) / 7)
    same = ForestModel((f.trees[0],) * 5, f.n_features, 4, f.feature_subsample_size, 0)
    np.testing.assert_allclose(predict_proba(same, X), f.trees[0].predict(X), rtol=0, atol=1e-15)


@pytest.mark.parametrize("label", [0, 1])
def test_forest_single_class(label):
    X = np.random.default_rng(0).normal(size=(30, 3))
    f = train_forest(X, np.full(30, label), n_estimators=3, max_depth=3)
    assert predict_proba(f, X).tolist() == [float(label)] * 30
    assert all(t.n_nodes == 1 for t in f.trees)


def test_forest_variance_shrinks_with_more_trees():
    X, y = _signal(300, seed=1)
    Xt, _ = _signal(200, seed=2)
    single = np.array([train_forest(X, y, n_estimators=1, max_depth=5, seed=s).predict_proba(Xt) for s in range(8)])
    many = np.array([train_forest(X, y, n_estimators=40, max_depth=5, seed=100 + s).predict_proba(Xt)
                     for s in range(8)])
    assert many.var(axis=0).mean() < single.var(axis=0).mean()


def test_forest_determinism():
    X, y = _signal(200)
    a = train_forest(X, y, n_estimators=5, max_depth=4, seed=9)
    b = train_forest(X, y, n_estimators=5, max_depth=4, seed=9)
    assert a.to_dict() == b.to_dict()
    c = train_forest(X, y, n_estimators=5, max_depth=4, seed=10)
    assert a.to_dict() != c.to_dict()


@pytest.mark.parametrize("kind", ["logistic", "forest", "boosted"])
def test_class_weights_raise_recall(kind):
    X, y = _signal(1500, seed=4, prevalence_shift=2.8)
    assert 0.01 < y.mean() < 0.08
    Xt, yt = _signal(3000, seed=5, prevalence_shift=2.8)
    train = {"logistic": lambda cw: train_logistic(X, y, cw),
             "forest": lambda cw: train_forest(X, y, cw, n_estimators=30, max_depth=4, seed=1),
             "boosted": lambda cw: train_boosted(X, y, cw, n_estimators=30, max_depth=3)}[kind]
    recall = lambda m: (predict_proba(m, Xt)[yt == 1] >= 0.5).mean()
    assert recall(train(ClassWeights.balanced(y))) > recall(train(ClassWeights.uniform()))


# ------------------------------------------------------------------ boosting

def test_zero_stages_predict_weighted_prevalence():
    X, y = _signal(200)
    cw = ClassWeights(3.0, 1.0)
    m = train_boosted(X, y, cw, n_estimators=0)
    sw = cw.sample_weights(y)
    expected = sw[y == 1].sum() / sw.sum()
    np.testing.assert_allclose(predict_proba(m, X), expected, rtol=1e-12)


def test_stump_leaves_match_closed_form():
    x = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    y = np.array([0, 0, 0, 1, 1, 1])
    m = train_boosted(x[:, None], y, n_estimators=1, max_depth=1, learning_rate=1.0, l2_leaf_lambda=1.0,
                      min_child_weight=0.0)
    t = m.trees[0]
    assert t.threshold[0] == 2.5
    p = 0.5  # base score log(3/3) = 0
    g, h = p - y, np.full(6, p * (1 - p))
    left, right = x <= 2.5, x > 2.5
    assert t.value[t.left[0]] == pytest.approx(-g[left].sum() / (h[left].sum() + 1.0))
    assert t.value[t.right[0]] == pytest.approx(-g[right].sum() / (h[right].sum() + 1.0))
    np.testing.assert_allclose(m.decision_function(x[:, None]), np.where(left, -1.5 / 1.75, 1.5 / 1.75))


def test_boosted_loss_strictly_decreases_first_stages():
    X, y = _signal(500)
    m = train_boosted(X, y, ClassWeights.balanced(y), n_estimators=10, max_depth=3)
    assert all(b < a for a, b in zip(m.trace, m.trace[1:]))


def test_boosted_leaf_optimality():
    X, y = _signal(300)
    cw = ClassWeights.balanced(y)
    m = train_boosted(X, y, cw, n_estimators=3, max_depth=3)
    sw = cw.sample_weights(y)
    margin = m.decision_function(X, n_estimators=2)
    p = sigmoid(margin)
    g, h = sw * (p - y), sw * p * (1 - p)
    t = m.trees[2]
    leaves = t.apply(X)
    lam = m.l2_leaf_lambda
    for leaf in np.unique(leaves):
        G, H = g[leaves == leaf].sum(), h[leaves == leaf].sum()
        v = t.value[leaf]
        assert v == pytest.approx(leaf_value(G, H, lam), rel=1e-9, abs=1e-12)
        obj = lambda w: G * w + 0.5 * (H + lam) * w * w
        for eps in (1e-3, -1e-3):
            assert obj(v + eps) >= obj(v)


def test_boosted_cover_and_determinism():
    X, y = _signal(300)
    a = train_boosted(X, y, ClassWeights.balanced(y), n_estimators=5, max_depth=4)
    b = train_boosted(X, y, ClassWeights.balanced(y), n_estimators=5, max_depth=4)
    assert a.to_dict() == b.to_dict()
    for t in a.trees:
        t.check()
        assert t.cover[0] == pytest.approx(ClassWeights.balanced(y).sample_weights(y).sum())


def test_boosted_rejects_bad_learning_rate():
    X, y = _signal(50)
    with pytest.raises(ModelError):
        train_boosted(X, y, learning_rate=1.5)


# ------------------------------------------------------------------ shared surface

@pytest.mark.parametrize("model", [
    LogisticModel(np.zeros(4), 0.0, 0.0),
    train_forest(*_signal(60, p=4), n_estimators=2, max_depth=2),
    train_boosted(*_signal(60, p=4), n_estimators=2, max_depth=2),
])
def test_predict_surface(model):
    assert predict_proba(model, np.zeros((0, 4))).shape == (0,)
    with pytest.raises(ModelError):
        predict_proba(model, np.zeros((3, 5)))


def test_serialization_round_trip_is_exact(tmp_path):
    X, y = _signal(200)
    cw = ClassWeights.balanced(y)
    for m in (train_logistic(X, y, cw), train_forest(X, y, cw, n_estimators=4, max_depth=4, seed=1),
              train_boosted(X, y, cw, n_estimators=4, max_depth=3)):
        path = tmp_path / f"{m.kind}.json"
        save_model(m, path, meta={"config_hash": "abc"})
        back, meta = load_model(path)
        assert type(back) is type(m) and meta == {"config_hash": "abc"}
        np.testing.assert_array_equal(predict_proba(back, X), predict_proba(m, X))
        assert back.to_dict() == m.to_dict()


def test_load_rejects_wrong_version(tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"format_version": 99, "kind": "forest", "model": {}}')
    with pytest.raises(ModelError, match="version"):
        load_model(path)


# ------------------------------------------------------------------ tuning

def test_select_config_prefers_smallest_within_tolerance():
    errors = {(50, 3): 0.204, (100, 3): 0.2, (400, 8): 0.199, (50, 5): 0.25}
    assert select_config(errors) == (50, 3)
    assert select_config(errors, tolerance=0.0) == (400, 8)


def test_balanced_error():
    assert balanced_error(np.array([0.9, 0.1, 0.6, 0.2]), np.array([1, 1, 0, 0])) == 0.5
    assert balanced_error(np.array([0.9, 0.1]), np.array([1, 0])) == 0.0


def test_inner_split_is_stratified_partition():
    y = np.array([1] * 8 + [0] * 92)
    fit, val = inner_split(y, seed=1)
    assert set(fit).isdisjoint(val) and len(fit) + len(val) == 100
    assert y[val].sum() == 2


def test_tuning_returns_grid_cell():
    X, y = _signal(300)
    for tune in (tune_forest, tune_boosted):
        choice = tune(X, y, seed=0, n_grid=(5, 10), depth_grid=(2, 3))
        assert (choice.n_estimators, choice.max_depth) in choice.errors
        assert len(choice.errors) == 4
