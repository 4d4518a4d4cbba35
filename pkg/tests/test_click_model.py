import math

import numpy as np
import pytest

from genie import (
    LabeledImpression,
    ProbitModel,
    SchemaError,
    UndefinedMetricError,
    bin_features,
    build_binning_spec,
    eval_cumulative_error,
    eval_logloss,
    impressions_from_logs,
    probit_train,
)
from genie.click_model import (
    BinningSpec,
    FeatureBinning,
    deserialize_click_model,
    serialize_click_model,
)

POSITION_BINS = FeatureBinning(kind="continuous", boundaries=(1.5, 2.5))
SCORE_BINS = FeatureBinning(kind="continuous", boundaries=(0.25, 0.5, 0.75))
SPEC = BinningSpec(feature_names=("position", "score"), bins=(POSITION_BINS, SCORE_BINS))


def test_bin_features_basic():
    x = bin_features({"position": 1.0, "score": 0.6}, SPEC)
    assert x.active_bins == ((0, 0), (1, 2))


def test_out_of_range_values_clamp_to_edge_bins():
    low = bin_features({"position": -5.0, "score": 0.0}, SPEC)
    high = bin_features({"position": 99.0, "score": 1.0}, SPEC)
    assert low.active_bins == ((0, 0), (1, 0))
    assert high.active_bins == ((0, 2), (1, 3))


def test_exactly_one_bin_per_feature():
    imps = [
        LabeledImpression({"position": float(p), "score": s, "block": b}, 1)
        for p, s, b in [(1, 0.2, "mainline"), (2, 0.9, "sidebar"), (3, 0.5, "mainline")]
    ]
    spec = build_binning_spec(imps)
    x = bin_features(imps[0].features, spec)
    assert len(x.active_bins) == 3
    features_seen = [j for j, _ in x.active_bins]
    assert features_seen == sorted(set(features_seen))


def test_unknown_feature_is_schema_error():
    with pytest.raises(SchemaError, match="unknown features"):
        bin_features({"position": 1.0, "score": 0.5, "bogus": 1.0}, SPEC)
    with pytest.raises(SchemaError, match="missing"):
        bin_features({"position": 1.0}, SPEC)


def test_categorical_unknown_value_goes_to_overflow_bin():
    binning = FeatureBinning(kind="categorical", categories=("a", "b"))
    assert binning.bin_of("a") == 0
    assert binning.bin_of("zzz") == 2
    assert binning.n_bins == 3


# ---------------------------------------------------------------------------
# probit

def fresh_model(beta=1.0, prior=(0.0, 1.0)):
    return probit_train([], spec=SPEC, prior=prior, beta=beta)


def test_empty_training_data_returns_prior():
    model = fresh_model(prior=(0.0, 1.0))
    assert np.all(model.mu == 0.0)
    assert np.all(model.sigma2 == 1.0)


def test_prediction_is_half_at_zero_mean():
    model = fresh_model()
    x = bin_features({"position": 1.0, "score": 0.6}, SPEC)
    assert model.predict(x) == pytest.approx(0.5)


def test_prediction_at_unit_standard_score():
    spec = BinningSpec(("f",), (FeatureBinning(kind="continuous", boundaries=()),))
    model = ProbitModel(
        spec=spec,
        mu=np.array([1.0]),
        sigma2=np.array([0.5]),
        beta=math.sqrt(0.5),
    )
    x = bin_features({"f": 0.0}, spec)
    assert model.predict(x) == pytest.approx(0.8413447460685429, abs=1e-12)


def test_raising_a_matched_mean_raises_the_prediction():
    model = fresh_model()
    x = bin_features({"position": 1.0, "score": 0.6}, SPEC)
    base = model.predict(x)
    flat = model._flat(x)
    model.mu[flat[0]] += 0.3
    model._fast = None
    assert model.predict(x) > base


def test_positive_example_raises_prediction_and_shrinks_variance():
    features = {"position": 1.0, "score": 0.6}
    x = bin_features(features, SPEC)
    model = fresh_model()
    before_pred = model.predict(x)
    before_sigma2 = model.sigma2.copy()
    model.update(x, 1)
    assert model.predict(x) > before_pred
    idx = model._flat(x)
    for i in idx:
        assert 0.0 < model.sigma2[i] < before_sigma2[i]
    untouched = sorted(set(range(len(model.sigma2))) - set(idx))
    assert np.all(model.sigma2[untouched] == before_sigma2[untouched])

    model2 = fresh_model()
    model2.update(x, -1)
    assert model2.predict(x) < before_pred


def test_variance_never_exceeds_prior_and_decreases_monotonically():
    rng = np.random.default_rng(7)
    model = fresh_model()
    for _ in range(200):
        features = {"position": float(rng.integers(1, 4)), "score": float(rng.uniform(0, 1))}
        x = bin_features(features, SPEC)
        idx = model._flat(x)
        before = model.sigma2[idx].copy()
        model.update(x, int(rng.choice([-1, 1])))
        after = model.sigma2[idx]
        assert np.all(after > 0)
        assert np.all(after < before)
    assert np.all(model.sigma2 <= 1.0)


def test_training_is_order_deterministic():
    rng = np.random.default_rng(11)
    data = [
        LabeledImpression(
            {"position": float(rng.integers(1, 4)), "score": float(rng.uniform(0, 1))},
            int(rng.choice([-1, 1])),
        )
        for _ in range(500)
    ]
    a = probit_train(data, spec=SPEC)
    b = probit_train(data, spec=SPEC)
    assert np.array_equal(a.mu, b.mu)
    assert np.array_equal(a.sigma2, b.sigma2)


def test_probit_recovers_known_ground_truth():
    # impressions drawn from a probit-linear ground truth over the same bins
    rng = np.random.default_rng(23)
    true_w = {0: -0.9, 1: -1.3, 2: -1.7}  # per position bin
    score_w = {0: -0.6, 1: -0.2, 2: 0.2, 3: 0.6}
    data = []
    for _ in range(100_000):
        pos_bin = int(rng.integers(0, 3))
        score_bin = int(rng.integers(0, 4))
        z = true_w[pos_bin] + score_w[score_bin]
        p = 0.5 * math.erfc(-z / math.sqrt(2))
        label = 1 if rng.random() < p else -1
        position = [1.0, 2.0, 3.0][pos_bin]
        score = [0.1, 0.3, 0.6, 0.9][score_bin]
        data.append(LabeledImpression({"position": position, "score": score}, label))
    model = probit_train(data, spec=SPEC)
    preds = [model.predict_impression(d.features) for d in data[-20_000:]]
    labels = [(d.label + 1) // 2 for d in data[-20_000:]]
    assert eval_cumulative_error(preds, labels) < 0.05


def test_probit_skips_unbinnable_impressions():
    data = [
        LabeledImpression({"position": 1.0, "score": 0.5}, 1),
        LabeledImpression({"position": 1.0}, 1),
    ]
    model = probit_train(data, spec=SPEC)
    assert model.skipped == 1


def test_impressions_from_logs_carry_labels(small_logs):
    imps = impressions_from_logs(small_logs.records)
    assert imps
    assert all(i.label in (-1, 1) for i in imps)
    assert set(imps[0].features) == {"position", "pclick", "query_class", "block"}


# ---------------------------------------------------------------------------
# evaluation metrics

def test_cumulative_error_cases():
    assert eval_cumulative_error([0.5, 0.5], [1, 0]) == pytest.approx(0.0)
    preds = np.full(200, 110 / 200)
    labels = np.concatenate([np.ones(100), np.zeros(100)])
    assert eval_cumulative_error(preds, labels) == pytest.approx(0.10)
    assert eval_cumulative_error([1, 0, 1], [1, 0, 1]) == 0.0
    with pytest.raises(UndefinedMetricError):
        eval_cumulative_error([0.1], [0])
    with pytest.raises(SchemaError):
        eval_cumulative_error([0.1, 0.2], [1])


def test_logloss_cases():
    assert eval_logloss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))
    assert eval_logloss([1.0, 0.0], [1, 0]) == pytest.approx(0.0, abs=1e-10)
    assert eval_logloss([0.25], [1]) == pytest.approx(-math.log(0.25))
    with pytest.raises(SchemaError):
        eval_logloss([0.1], [1, 0])


def test_metrics_agree_with_direct_reimplementation():
    rng = np.random.default_rng(31)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        preds = rng.uniform(0.001, 0.999, size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        direct_cum = abs(labels.sum() - preds.sum()) / labels.sum()
        clipped = np.minimum(np.maximum(preds, 1e-12), 1 - 1e-12)
        direct_ll = float(
            np.mean(-(labels * np.log(clipped)) - (1 - labels) * np.log(1 - clipped))
        )
        assert abs(eval_cumulative_error(preds, labels) - direct_cum) < 1e-12
        assert abs(eval_logloss(preds, labels) - direct_ll) < 1e-12


# ---------------------------------------------------------------------------
# serialization

def test_probit_serialization_round_trip_is_byte_identical(small_logs):
    imps = impressions_from_logs(small_logs.records)
    model = probit_train(imps)
    text = serialize_click_model(model)
    clone = deserialize_click_model(text)
    assert serialize_click_model(clone) == text
    for imp in imps[:50]:
        assert clone.predict_impression(imp.features) == model.predict_impression(imp.features)
