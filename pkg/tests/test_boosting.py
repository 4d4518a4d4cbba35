import math

import numpy as np
import pytest

from genie import ConfigurationError, GbtParams, LabeledImpression, SchemaError, gbt_predict, gbt_train
from genie.boosting import GbtModel, TreeNode, sigmoid, validate_tree
from genie.click_model import (
    deserialize_click_model,
    eval_logloss,
    impressions_from_logs,
    serialize_click_model,
)


def constant_model(weights, base=0.0):
    return GbtModel(
        trees=[TreeNode(weight=w) for w in weights],
        base_score=base,
        learning_rate=0.1,
        max_depth=3,
        min_samples_leaf=1,
        feature_names=("x",),
        feature_kinds={"x": "continuous"},
    )


def test_zero_weights_predict_half():
    model = constant_model([0.0, 0.0, 0.0])
    assert gbt_predict(model, {"x": 1.0}) == pytest.approx(0.5)


def test_weights_summing_to_two():
    model = constant_model([0.5, 1.5])
    assert gbt_predict(model, {"x": 0.0}) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)
    assert gbt_predict(model, {"x": 0.0}) == pytest.approx(0.8807970779778823)


def test_negated_weights_are_symmetric():
    pos = constant_model([0.7, 1.3])
    neg = constant_model([-0.7, -1.3])
    assert gbt_predict(neg, {"x": 0.0}) == pytest.approx(1.0 - gbt_predict(pos, {"x": 0.0}), abs=1e-12)
    assert gbt_predict(neg, {"x": 0.0}) == pytest.approx(0.11920292202211755)


def test_zero_trees_forbidden():
    with pytest.raises(ConfigurationError):
        GbtParams(n_trees=0)


def test_constant_positive_labels_saturate_up():
    data = [LabeledImpression({"x": float(i % 7)}, 1) for i in range(200)]
    model = gbt_train(data, GbtParams(n_trees=1, min_samples_leaf=5))
    for i in range(7):
        assert gbt_predict(model, {"x": float(i)}) > 0.5


def make_xor_data(n=4000, seed=3):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        x1, x2 = rng.uniform(0, 1, size=2)
        p = 0.85 if (x1 > 0.5) != (x2 > 0.5) else 0.15
        data.append(LabeledImpression({"a": float(x1), "b": float(x2)}, 1 if rng.random() < p else -1))
    return data


def best_single_feature_logistic_loss(data, feature):
    """Brute-force 1-feature logistic fit by grid search over slope and intercept."""
    xs = np.array([d.features[feature] for d in data])
    ys = np.array([(d.label + 1) // 2 for d in data])
    best = math.inf
    for w0 in np.linspace(-3, 3, 61):
        for w1 in np.linspace(-8, 8, 81):
            p = 1.0 / (1.0 + np.exp(-(w0 + w1 * xs)))
            best = min(best, eval_logloss(p, ys))
    return best


def test_xor_dataset_beats_single_feature_linear_model():
    data = make_xor_data()
    model = gbt_train(data, GbtParams(n_trees=60, max_depth=2, min_samples_leaf=20))
    preds = [gbt_predict(model, d.features) for d in data]
    labels = [(d.label + 1) // 2 for d in data]
    gbt_loss = eval_logloss(preds, labels)
    linear_loss = min(
        best_single_feature_logistic_loss(data, "a"),
        best_single_feature_logistic_loss(data, "b"),
    )
    assert gbt_loss < linear_loss


def test_training_loss_non_increasing_for_small_learning_rate(small_logs):
    impressions = impressions_from_logs(small_logs.records)
    model = gbt_train(impressions, GbtParams(n_trees=40, learning_rate=0.1, max_depth=3))
    losses = model.train_losses
    assert len(losses) == 40
    assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))


def test_categorical_splits_learn_class_effects():
    rng = np.random.default_rng(9)
    data = []
    for _ in range(3000):
        cat = str(rng.integers(0, 4))
        p = {"0": 0.1, "1": 0.6, "2": 0.2, "3": 0.8}[cat]
        data.append(LabeledImpression({"c": cat}, 1 if rng.random() < p else -1))
    model = gbt_train(data, GbtParams(n_trees=30, max_depth=2, min_samples_leaf=20))
    p0 = gbt_predict(model, {"c": "0"})
    p3 = gbt_predict(model, {"c": "3"})
    assert p0 < 0.2
    assert p3 > 0.6
    assert any(t.categories is not None for t in model.trees if not t.is_leaf)


def test_trained_trees_are_wellformed(small_logs):
    impressions = impressions_from_logs(small_logs.records)
    model = gbt_train(impressions, GbtParams(n_trees=15, max_depth=4, min_samples_leaf=10))
    vocab = {
        name: {str(imp.features[name]) for imp in impressions}
        for name, kind in model.feature_kinds.items()
        if kind == "categorical"
    }
    for tree in model.trees:
        validate_tree(tree, model.feature_kinds, vocab)


def test_missing_feature_is_schema_error(small_logs):
    impressions = impressions_from_logs(small_logs.records)
    model = gbt_train(impressions[:500], GbtParams(n_trees=5))
    with pytest.raises(SchemaError):
        model.predict_impression({"position": 1.0})


def test_gbt_serialization_round_trip(small_logs):
    impressions = impressions_from_logs(small_logs.records)
    model = gbt_train(impressions[:2000], GbtParams(n_trees=10))
    text = serialize_click_model(model)
    clone = deserialize_click_model(text)
    assert serialize_click_model(clone) == text
    for imp in impressions[:100]:
        assert clone.predict_impression(imp.features) == model.predict_impression(imp.features)


def test_sigmoid_symmetry_helper():
    for s in (0.3, 1.7, 5.0):
        assert sigmoid(-s) == pytest.approx(1.0 - sigmoid(s), abs=1e-12)
