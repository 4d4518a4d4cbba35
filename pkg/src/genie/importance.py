"""Importance-sampling counterfactual estimation over randomized logs.

The logging side randomizes selected knobs per request from truncated
Gaussians and records the sampled values in each log record, so densities
are reconstructible offline. A counterfactual knob distribution is then
evaluated by reweighting realized per-request outcomes with the density
ratio, computed in log space so that identical distributions cancel
exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigurationError, SchemaError, WeightError
from .marketplace import MarketplaceModel, attach_sampled_clicks, synthesize_request
from .records import AuctionData, DriftSpec, LogDataset, PolicyConfig
from .seeds import substream

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KnobGaussian:
    """Truncated Gaussian over one knob; bounds default to mean +- 3 stddev."""

    mean: float
    stddev: float
    lower: float = math.nan
    upper: float = math.nan

    def __post_init__(self):
        if self.stddev <= 0:
            raise ConfigurationError("stddev must be > 0")
        if math.isnan(self.lower):
            object.__setattr__(self, "lower", self.mean - 3.0 * self.stddev)
        if math.isnan(self.upper):
            object.__setattr__(self, "upper", self.mean + 3.0 * self.stddev)
        if not self.lower < self.upper:
            raise ConfigurationError("truncation bounds must satisfy lower < upper")
        if not self.lower <= self.mean <= self.upper:
            raise ConfigurationError("truncation bounds must contain the mean")

    def _z(self, x: float) -> float:
        return (x - self.mean) / self.stddev

    def logpdf(self, x: float) -> float:
        if x < self.lower or x > self.upper:
            return -math.inf
        z = self._z(x)
        mass = ndtr(self._z(self.upper)) - ndtr(self._z(self.lower))
        return -0.5 * z * z - _LOG_SQRT_2PI - math.log(self.stddev) - math.log(mass)

    def sample(self, rng: np.random.Generator) -> float:
        lo, hi = ndtr(self._z(self.lower)), ndtr(self._z(self.upper))
        u = rng.uniform(lo, hi)
        return float(self.mean + self.stddev * ndtri(u))


@dataclass(frozen=True)
class RandomizationSpec:
    """Logging-time randomization: which knobs get jittered and how."""

    knobs: dict[str, KnobGaussian]

    def __post_init__(self):
        if not self.knobs:
            raise ConfigurationError("randomization spec must cover at least one knob")


@dataclass(frozen=True)
class ProposalDistribution:
    """The counterfactual knob distribution being evaluated."""

    knobs: dict[str, KnobGaussian]

    def check_support(self, logging: RandomizationSpec) -> None:
        for name, target in self.knobs.items():
            source = logging.knobs.get(name)
            if source is None:
                raise ConfigurationError(f"knob {name!r} was not randomized at logging time")
            if target.lower < source.lower or target.upper > source.upper:
                warnings.warn(
                    f"proposal support for {name!r} exceeds the logging truncation; "
                    "importance weights may be unbounded",
                    stacklevel=2,
                )


def point_proposal(spec: RandomizationSpec, means: dict[str, float]) -> ProposalDistribution:
    """Proposal with shifted means but the logging spec's stddevs and bounds."""
    knobs = {}
    for name, gaussian in spec.knobs.items():
        mean = means.get(name, gaussian.mean)
        knobs[name] = KnobGaussian(
            mean=mean, stddev=gaussian.stddev, lower=gaussian.lower, upper=gaussian.upper
        )
    return ProposalDistribution(knobs=knobs)


def generate_randomized_logs(
    model: MarketplaceModel,
    spec: RandomizationSpec,
    n_requests: int,
    seed: int,
    base_policy: PolicyConfig | None = None,
    drift: DriftSpec | None = None,
) -> LogDataset:
    """Logged requests with per-request knob values drawn i.i.d. from the spec.

    Sampled values land in each record's policy parameters, so the logging
    propensities can be reconstructed from the log alone. Clicks are
    Bernoulli draws from the true click function (realized outcomes, as an
    observational estimator would consume).
    """
    if n_requests < 1:
        raise ConfigurationError("n_requests must be >= 1")
    base = base_policy or PolicyConfig()
    records = []
    for i in range(n_requests):
        active = base
        if drift is not None and i >= drift.drift_index:
            active = drift.drifted_policy
        rng = substream(seed, "randomize", i)
        sampled = {name: gaussian.sample(rng) for name, gaussian in sorted(spec.knobs.items())}
        record = synthesize_request(model, active.updated(sampled), i, seed)
        attach_sampled_clicks(model, record, substream(seed, "clicks", i))
        records.append(record)
    return LogDataset(records=records, logging_policy=base, drift_spec=drift)


# ---------------------------------------------------------------------------
# realized per-request outcomes

def realized_outcomes(record: AuctionData) -> tuple[float, float, float, float]:
    """(revenue, clicks, impressions, mainline impressions) from logged outcomes."""
    alloc = record.logged_allocation
    if alloc is None:
        raise SchemaError(f"request {record.request_id}: no logged allocation")
    revenue = clicks = 0.0
    mainline = 0
    for placement in alloc.placements:
        if placement.clicked is None:
            raise SchemaError(f"request {record.request_id}: logged allocation has no click outcomes")
        if placement.clicked:
            clicks += 1.0
            revenue += placement.cpc
        if placement.block == "mainline":
            mainline += 1
    return revenue, clicks, float(len(alloc.placements)), float(mainline)


def extract_revenue(record: AuctionData) -> float:
    return realized_outcomes(record)[0]


def extract_clicks(record: AuctionData) -> float:
    return realized_outcomes(record)[1]


def extract_impressions(record: AuctionData) -> float:
    return realized_outcomes(record)[2]


def extract_mainline(record: AuctionData) -> float:
    return realized_outcomes(record)[3]


# ---------------------------------------------------------------------------
# the estimator

@dataclass(frozen=True)
class ISEstimate:
    value: float
    ess: float
    n: int


def importance_weights(
    records: Sequence[AuctionData],
    logging: RandomizationSpec,
    target: ProposalDistribution,
) -> np.ndarray:
    """Per-record density ratios P*(x)/P(x), computed in log space."""
    target.check_support(logging)
    weights = np.empty(len(records))
    for i, record in enumerate(records):
        log_w = 0.0
        for name, target_dist in target.knobs.items():
            x = record.policy_params.get(name)
            log_p = logging.knobs[name].logpdf(x)
            if log_p == -math.inf:
                raise WeightError(
                    f"request {record.request_id}: knob {name}={x} has zero logging density"
                )
            log_w += target_dist.logpdf(x) - log_p
        weights[i] = math.exp(log_w)
    return weights


def is_estimate(
    logs: LogDataset | Sequence[AuctionData],
    logging: RandomizationSpec,
    target: ProposalDistribution,
    metric: Callable[[AuctionData], float],
    self_normalized: bool = False,
) -> ISEstimate:
    """(1/N) sum w(x_i) y_i with w the truncated-Gaussian density ratio.

    With target == logging the weights are exactly 1 and the estimate equals
    the plain sample mean. ``self_normalized`` divides by sum(w) instead of N.
    """
    records = logs.records if isinstance(logs, LogDataset) else list(logs)
    if not records:
        raise ConfigurationError("cannot estimate from an empty log")
    weights = importance_weights(records, logging, target)
    ys = np.fromiter((metric(r) for r in records), dtype=float, count=len(records))
    denom = weights.sum() if self_normalized else float(len(records))
    value = float((weights * ys).sum() / denom)
    ess = float(weights.sum() ** 2 / (weights**2).sum())
    return ISEstimate(value=value, ess=ess, n=len(records))


def plain_kpi_means(records: Sequence[AuctionData]) -> dict[str, float]:
    """Baseline KPIs under the logging distribution: unweighted sample means."""
    outcomes = np.array([realized_outcomes(r) for r in records])
    rev, clicks, imps, ml = outcomes.sum(axis=0)
    n = len(records)
    return {
        "rpm": 1000.0 * rev / n,
        "cy": clicks / n,
        "iy": imps / n,
        "mliy": ml / n,
        "cpc": rev / clicks if clicks > 0 else math.nan,
    }


def is_kpi_estimates(
    logs: LogDataset | Sequence[AuctionData],
    logging: RandomizationSpec,
    target: ProposalDistribution,
    self_normalized: bool = False,
) -> dict[str, float]:
    """Counterfactual KPIs under the proposal distribution."""
    records = logs.records if isinstance(logs, LogDataset) else list(logs)
    rev = is_estimate(records, logging, target, extract_revenue, self_normalized)
    clicks = is_estimate(records, logging, target, extract_clicks, self_normalized)
    imps = is_estimate(records, logging, target, extract_impressions, self_normalized)
    ml = is_estimate(records, logging, target, extract_mainline, self_normalized)
    return {
        "rpm": 1000.0 * rev.value,
        "cy": clicks.value,
        "iy": imps.value,
        "mliy": ml.value,
        "cpc": rev.value / clicks.value if clicks.value > 0 else math.nan,
        "ess": rev.ess,
    }
