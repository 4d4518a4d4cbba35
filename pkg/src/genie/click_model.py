"""Click calibration models over logged impressions.

Two interchangeable calibrators re-estimate the click probability of an ad
in a (possibly counterfactual) page allocation:

* an online Bayesian probit over one-hot binned features, trained in a
  single sequential pass with Gaussian message-passing updates, and
* a gradient-boosted tree ensemble (see ``boosting``) on raw features.

Both expose ``predict_impression(features) -> probability``.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erfcx

from .errors import ConfigurationError, SchemaError, UndefinedMetricError
from .records import AuctionData

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_P_FLOOR = 1e-300
_P_CEIL = 1.0 - 1e-16
LOSS_EPS = 1e-12


@dataclass(frozen=True)
class LabeledImpression:
    """Raw feature map plus click signal: +1 click, -1 no click."""

    features: dict[str, float | str]
    label: int

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise SchemaError(f"label must be -1 or +1, got {self.label}")


def impression_features(query_class: int, block: str, position: int, pclick: float) -> dict:
    """Feature map for an ad shown at a 1-based page position."""
    return {
        "position": float(position),
        "pclick": float(pclick),
        "query_class": str(query_class),
        "block": block,
    }


def impressions_from_logs(records: Iterable[AuctionData]) -> list[LabeledImpression]:
    """Extract labeled impressions from logged allocations carrying click outcomes."""
    out = []
    for record in records:
        alloc = record.logged_allocation
        if alloc is None:
            continue
        for position, placement in enumerate(alloc.placements, start=1):
            if placement.clicked is None:
                continue
            out.append(
                LabeledImpression(
                    features=impression_features(
                        record.query_class, placement.block, position, placement.pclick
                    ),
                    label=1 if placement.clicked else -1,
                )
            )
    return out


# ---------------------------------------------------------------------------
# feature binning

@dataclass(frozen=True)
class FeatureBinning:
    """Binning of one feature: interior boundaries (continuous) or a vocabulary
    plus overflow bin (categorical)."""

    kind: str  # "continuous" | "categorical"
    boundaries: tuple[float, ...] = ()
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ConfigurationError(f"unknown binning kind {self.kind!r}")
        if self.kind == "continuous" and list(self.boundaries) != sorted(self.boundaries):
            raise ConfigurationError("boundaries must be sorted")
        object.__setattr__(self, "_cat_index", {c: i for i, c in enumerate(self.categories)})

    @property
    def n_bins(self) -> int:
        if self.kind == "continuous":
            return len(self.boundaries) + 1
        return len(self.categories) + 1  # trailing overflow bin

    def bin_of(self, value) -> int:
        if self.kind == "continuous":
            return bisect.bisect_right(self.boundaries, float(value))
        return self._cat_index.get(str(value), len(self.categories))


@dataclass(frozen=True)
class BinningSpec:
    feature_names: tuple[str, ...]
    bins: tuple[FeatureBinning, ...]

    def __post_init__(self):
        if len(self.feature_names) != len(self.bins):
            raise ConfigurationError("feature_names and bins must align")
        object.__setattr__(self, "_name_set", frozenset(self.feature_names))

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def offsets(self) -> list[int]:
        offs, total = [], 0
        for b in self.bins:
            offs.append(total)
            total += b.n_bins
        return offs

    @property
    def total_bins(self) -> int:
        return sum(b.n_bins for b in self.bins)


@dataclass(frozen=True)
class BinnedVector:
    """Exactly one active bin per feature: (feature index, bin index) pairs."""

    active_bins: tuple[tuple[int, int], ...]


def _key_mismatch(impression: dict, spec: BinningSpec) -> SchemaError:
    extra = sorted(set(impression) - set(spec.feature_names))
    if extra:
        return SchemaError(f"unknown features not covered by binning spec: {extra}")
    missing = sorted(set(spec.feature_names) - set(impression))
    return SchemaError(f"impression missing features {missing}")


def bin_features(impression: dict[str, float | str], spec: BinningSpec) -> BinnedVector:
    """One-hot bin an impression. Continuous values outside the boundary range
    clamp to the edge bins; features absent from the spec are a schema error."""
    if impression.keys() != spec._name_set:
        raise _key_mismatch(impression, spec)
    return BinnedVector(
        active_bins=tuple(
            (j, spec.bins[j].bin_of(impression[name])) for j, name in enumerate(spec.feature_names)
        )
    )


def build_binning_spec(
    impressions: Sequence[LabeledImpression],
    n_bins: int = 16,
    feature_names: Sequence[str] | None = None,
) -> BinningSpec:
    """Equal-frequency binning for continuous features, vocabularies for strings."""
    if not impressions:
        raise ConfigurationError("cannot build a binning spec from no impressions")
    names = list(feature_names) if feature_names else sorted(impressions[0].features)
    bins = []
    for name in names:
        values = [imp.features[name] for imp in impressions]
        if isinstance(values[0], str):
            bins.append(FeatureBinning(kind="categorical", categories=tuple(sorted(set(values)))))
        else:
            qs = np.quantile(np.asarray(values, dtype=float), np.linspace(0, 1, n_bins + 1)[1:-1])
            boundaries = tuple(sorted(set(float(q) for q in qs)))
            bins.append(FeatureBinning(kind="continuous", boundaries=boundaries))
    return BinningSpec(feature_names=tuple(names), bins=tuple(bins))


# ---------------------------------------------------------------------------
# online Bayesian probit

def _std_norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / _SQRT2)


def _v_over_cdf(t: float) -> float:
    # N(t;0,1) / Phi(t), stable for very negative t
    return _SQRT_2_OVER_PI / erfcx(-t / _SQRT2)


@dataclass
class ProbitModel:
    """Per-bin Gaussian weights (mu, sigma^2) with probit link of steepness beta."""

    spec: BinningSpec
    mu: np.ndarray
    sigma2: np.ndarray
    beta: float
    prior_mu: float = 0.0
    prior_sigma2: float = 1.0
    skipped: int = 0

    def __post_init__(self):
        self._offsets = self.spec.offsets()
        self._fast = None  # (mu list, sigma2 list) cache for the prediction path

    def _flat(self, x: BinnedVector) -> list[int]:
        if len(x.active_bins) != self.spec.n_features:
            raise SchemaError(
                f"binned vector has {len(x.active_bins)} features, model expects {self.spec.n_features}"
            )
        return [self._offsets[j] + b for j, b in x.active_bins]

    def _accumulate(self, idx) -> float:
        if self._fast is None:
            self._fast = (self.mu.tolist(), self.sigma2.tolist())
        mu_list, sigma2_list = self._fast
        mu = 0.0
        sigma2 = 0.0
        for i in idx:
            mu += mu_list[i]
            sigma2 += sigma2_list[i]
        p = _std_norm_cdf(mu / math.sqrt(sigma2 + self.beta**2))
        return min(max(p, _P_FLOOR), _P_CEIL)

    def predict(self, x: BinnedVector) -> float:
        return self._accumulate(self._flat(x))

    def predict_impression(self, features: dict) -> float:
        spec = self.spec
        if features.keys() != spec._name_set:
            raise _key_mismatch(features, spec)
        offsets = self._offsets
        bins = spec.bins
        idx = [
            offsets[j] + bins[j].bin_of(features[name])
            for j, name in enumerate(spec.feature_names)
        ]
        return self._accumulate(idx)

    def update(self, x: BinnedVector, label: int) -> None:
        """One Gaussian message-passing step for a single (x, y) pair."""
        if label not in (-1, 1):
            raise SchemaError(f"label must be -1 or +1, got {label}")
        self._fast = None
        idx = self._flat(x)
        sigma2 = self.sigma2[idx]
        total = float(sigma2.sum()) + self.beta**2
        sqrt_total = math.sqrt(total)
        t = label * float(self.mu[idx].sum()) / sqrt_total
        v = _v_over_cdf(t)
        u = v * (v + t)
        self.mu[idx] += label * (sigma2 / sqrt_total) * v
        self.sigma2[idx] = sigma2 * (1.0 - (sigma2 / total) * u)


def probit_train(
    data: Iterable[LabeledImpression],
    spec: BinningSpec | None = None,
    prior: tuple[float, float] = (0.0, 1.0),
    beta: float = 1.0,
) -> ProbitModel:
    """Single sequential pass over the data in order.

    Impressions that fail binning are skipped and counted on the model.
    With no spec given, an equal-frequency spec is built from the data first.
    """
    if beta <= 0:
        raise ConfigurationError("beta must be > 0")
    mu0, sigma20 = prior
    if sigma20 <= 0:
        raise ConfigurationError("prior variance must be > 0")
    data = list(data)
    if spec is None:
        spec = build_binning_spec(data)
    model = ProbitModel(
        spec=spec,
        mu=np.full(spec.total_bins, float(mu0)),
        sigma2=np.full(spec.total_bins, float(sigma20)),
        beta=float(beta),
        prior_mu=float(mu0),
        prior_sigma2=float(sigma20),
    )
    for imp in data:
        try:
            x = bin_features(imp.features, spec)
        except SchemaError:
            model.skipped += 1
            continue
        model.update(x, imp.label)
    return model


# ---------------------------------------------------------------------------
# evaluation metrics

def eval_cumulative_error(preds: Sequence[float], labels: Sequence[int]) -> float:
    """|sum(y) - sum(y_hat)| / sum(y) over {0,1} labels."""
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape:
        raise SchemaError(f"length mismatch: {preds.shape} vs {labels.shape}")
    label_sum = labels.sum()
    if label_sum <= 0:
        raise UndefinedMetricError("cumulative error undefined: label sum is zero")
    return float(abs(label_sum - preds.sum()) / label_sum)


def eval_logloss(preds: Sequence[float], labels: Sequence[int]) -> float:
    """Mean cross-entropy over {0,1} labels, predictions clipped to [eps, 1-eps]."""
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if preds.shape != labels.shape:
        raise SchemaError(f"length mismatch: {preds.shape} vs {labels.shape}")
    p = np.clip(preds, LOSS_EPS, 1.0 - LOSS_EPS)
    return float(np.mean(-labels * np.log(p) - (1.0 - labels) * np.log(1.0 - p)))


# ---------------------------------------------------------------------------
# model file round trip

def _binning_to_dict(spec: BinningSpec) -> dict:
    return {
        "feature_names": list(spec.feature_names),
        "bins": [
            {"kind": b.kind, "boundaries": list(b.boundaries), "categories": list(b.categories)}
            for b in spec.bins
        ],
    }


def _binning_from_dict(data: dict) -> BinningSpec:
    return BinningSpec(
        feature_names=tuple(data["feature_names"]),
        bins=tuple(
            FeatureBinning(
                kind=b["kind"],
                boundaries=tuple(float(x) for x in b["boundaries"]),
                categories=tuple(str(c) for c in b["categories"]),
            )
            for b in data["bins"]
        ),
    )


def serialize_click_model(model) -> str:
    """Canonical JSON for either calibrator; byte-stable across round trips."""
    from .boosting import GbtModel, gbt_to_dict

    if isinstance(model, ProbitModel):
        payload = {
            "kind": "probit",
            "beta": model.beta,
            "prior_mu": model.prior_mu,
            "prior_sigma2": model.prior_sigma2,
            "binning": _binning_to_dict(model.spec),
            "mu": [float(x) for x in model.mu],
            "sigma2": [float(x) for x in model.sigma2],
        }
    elif isinstance(model, GbtModel):
        payload = gbt_to_dict(model)
    else:
        raise SchemaError(f"cannot serialize click model of type {type(model).__name__}")
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def deserialize_click_model(text: str):
    from .boosting import gbt_from_dict

    payload = json.loads(text)
    kind = payload.get("kind")
    if kind == "probit":
        spec = _binning_from_dict(payload["binning"])
        return ProbitModel(
            spec=spec,
            mu=np.asarray(payload["mu"], dtype=float),
            sigma2=np.asarray(payload["sigma2"], dtype=float),
            beta=float(payload["beta"]),
            prior_mu=float(payload["prior_mu"]),
            prior_sigma2=float(payload["prior_sigma2"]),
        )
    if kind == "gbt":
        return gbt_from_dict(payload)
    raise SchemaError(f"unknown click model kind {kind!r}")


def save_click_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_click_model(model))
        fh.write("\n")


def load_click_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        return deserialize_click_model(fh.read())
