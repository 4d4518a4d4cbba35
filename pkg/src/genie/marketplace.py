"""Synthetic ground-truth marketplace.

This is the input layer of the whole pipeline: a fixed population of
advertisers and query classes, a true click function, and a request
generator that runs the real auction engine under a logging policy to
produce replayable logs. Because the true click probabilities are known,
the same generator doubles as the KPI oracle that every estimator is
judged against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .auction import KpiRecord, apply_setting, run_auction
from .errors import ConfigurationError
from .records import (
    KNOB_REGISTRY,
    AdRecord,
    AuctionData,
    BlockSpec,
    DriftSpec,
    LogDataset,
    PagePlacement,
    PageAllocation,
    PageTemplate,
    PolicyConfig,
)
from .seeds import substream

# (intercept, position, relevance_logit, position x relevance_logit, class_multiplier)
DEFAULT_TRUE_CLICK_PARAMS = (-1.1, -0.4, 0.85, -0.1, 0.0)

DEFAULT_TEMPLATE_LAYOUTS = (
    (("mainline", 3, 0.12), ("sidebar", 2, 0.0)),
    (("mainline", 1, 0.12), ("sidebar", 4, 0.0)),
    (("mainline", 2, 0.12), ("sidebar", 3, 0.0)),
)


@dataclass(frozen=True)
class AdvertiserSpec:
    advertiser_id: int
    bid_mean: float
    bid_stddev: float
    base_quality: float


@dataclass(frozen=True)
class QueryClass:
    class_id: int
    arrival_prob: float
    relevance: tuple[float, ...]  # per-advertiser multiplier, aligned with the advertiser list


@dataclass
class GeneratorConfig:
    n_advertisers: int
    n_query_classes: int
    bid_scale: float = 1.0
    bid_spread: float = 0.35       # lognormal sigma across advertisers
    bid_noise: float = 0.25        # lognormal sigma per request
    participation: float = 0.65
    pclick_bounds: tuple[float, float] = (0.02, 0.95)
    true_click_params: tuple[float, ...] = DEFAULT_TRUE_CLICK_PARAMS
    template_layouts: tuple = DEFAULT_TEMPLATE_LAYOUTS

    def __post_init__(self):
        if self.n_advertisers < 1 or self.n_query_classes < 1:
            raise ConfigurationError("advertiser and query class counts must be >= 1")
        if self.bid_scale <= 0:
            raise ConfigurationError("bid_scale must be > 0")
        if self.bid_spread < 0 or self.bid_noise < 0:
            raise ConfigurationError("bid spreads must be >= 0")
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation must be in (0, 1]")
        lo, hi = self.pclick_bounds
        if not 0 < lo < hi < 1:
            raise ConfigurationError("pclick_bounds must satisfy 0 < lo < hi < 1")
        if len(self.true_click_params) != 5:
            raise ConfigurationError("true_click_params must have 5 coefficients")


@dataclass
class MarketplaceModel:
    advertisers: tuple[AdvertiserSpec, ...]
    query_classes: tuple[QueryClass, ...]
    true_click_params: tuple[float, ...]
    templates: tuple[PageTemplate, ...]
    participation: float
    bid_noise: float
    pclick_bounds: tuple[float, float]
    seed: int

    def __post_init__(self):
        self._pclick_table: list[list[float]] | None = None
        self._arrival_cdf: list[float] | None = None

    def relevance(self, query_class: int, advertiser_id: int) -> float:
        return self.query_classes[query_class].relevance[advertiser_id]

    def latent_relevance(self, query_class: int, advertiser_id: int) -> float:
        lo, hi = self.pclick_bounds
        value = self.advertisers[advertiser_id].base_quality * self.relevance(query_class, advertiser_id)
        return lo if value < lo else hi if value > hi else value

    def pclick_table(self) -> list[list[float]]:
        """Per-(query class, advertiser) latent relevance, cached."""
        if self._pclick_table is None:
            self._pclick_table = [
                [self.latent_relevance(c, a) for a in range(len(self.advertisers))]
                for c in range(len(self.query_classes))
            ]
        return self._pclick_table

    def arrival_cdf(self) -> list[float]:
        if self._arrival_cdf is None:
            cdf, acc = [], 0.0
            for qc in self.query_classes:
                acc += qc.arrival_prob
                cdf.append(acc)
            self._arrival_cdf = cdf
        return self._arrival_cdf

    def true_click_prob(self, query_class: int, advertiser_id: int, position: int, pclick: float) -> float:
        """Ground-truth click probability for an ad shown at a 1-based page position."""
        c0, c_pos, c_rel, c_int, c_mult = self.true_click_params
        rel_logit = math.log(pclick / (1.0 - pclick))
        z = (
            c0
            + c_pos * position
            + c_rel * rel_logit
            + c_int * position * rel_logit
            + c_mult * self.relevance(query_class, advertiser_id)
        )
        return 1.0 / (1.0 + math.exp(-z))

    def to_dict(self) -> dict:
        return {
            "advertisers": [
                {
                    "advertiser_id": a.advertiser_id,
                    "bid_mean": a.bid_mean,
                    "bid_stddev": a.bid_stddev,
                    "base_quality": a.base_quality,
                }
                for a in self.advertisers
            ],
            "query_classes": [
                {
                    "class_id": q.class_id,
                    "arrival_prob": q.arrival_prob,
                    "relevance": list(q.relevance),
                }
                for q in self.query_classes
            ],
            "true_click_params": list(self.true_click_params),
            "templates": [
                {
                    "template_id": t.template_id,
                    "blocks": [
                        {"name": b.name, "capacity": b.capacity, "min_pclick": b.min_pclick}
                        for b in t.blocks
                    ],
                }
                for t in self.templates
            ],
            "participation": self.participation,
            "bid_noise": self.bid_noise,
            "pclick_bounds": list(self.pclick_bounds),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MarketplaceModel":
        return cls(
            advertisers=tuple(
                AdvertiserSpec(
                    advertiser_id=int(a["advertiser_id"]),
                    bid_mean=float(a["bid_mean"]),
                    bid_stddev=float(a["bid_stddev"]),
                    base_quality=float(a["base_quality"]),
                )
                for a in data["advertisers"]
            ),
            query_classes=tuple(
                QueryClass(
                    class_id=int(q["class_id"]),
                    arrival_prob=float(q["arrival_prob"]),
                    relevance=tuple(float(r) for r in q["relevance"]),
                )
                for q in data["query_classes"]
            ),
            true_click_params=tuple(float(c) for c in data["true_click_params"]),
            templates=tuple(
                PageTemplate(
                    template_id=int(t["template_id"]),
                    blocks=tuple(
                        BlockSpec(str(b["name"]), int(b["capacity"]), float(b["min_pclick"]))
                        for b in t["blocks"]
                    ),
                )
                for t in data["templates"]
            ),
            participation=float(data["participation"]),
            bid_noise=float(data["bid_noise"]),
            pclick_bounds=tuple(float(x) for x in data["pclick_bounds"]),  # type: ignore[arg-type]
            seed=int(data["seed"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "MarketplaceModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def generate_marketplace(config: GeneratorConfig, seed: int) -> MarketplaceModel:
    """Draw a marketplace deterministically from (config, seed)."""
    rng = substream(seed, "marketplace")
    advertisers = []
    for i in range(config.n_advertisers):
        bid_mean = config.bid_scale * float(np.exp(rng.normal(0.0, config.bid_spread)))
        base_quality = float(np.clip(rng.beta(2.2, 4.5), 0.02, 0.95))
        advertisers.append(
            AdvertiserSpec(
                advertiser_id=i,
                bid_mean=bid_mean,
                bid_stddev=bid_mean * config.bid_noise,
                base_quality=base_quality,
            )
        )
    arrival = rng.dirichlet(np.full(config.n_query_classes, 1.5))
    query_classes = tuple(
        QueryClass(
            class_id=c,
            arrival_prob=float(arrival[c]),
            relevance=tuple(float(m) for m in rng.uniform(0.25, 1.75, size=config.n_advertisers)),
        )
        for c in range(config.n_query_classes)
    )
    templates = tuple(
        PageTemplate(
            template_id=t,
            blocks=tuple(BlockSpec(name, capacity, min_pclick) for name, capacity, min_pclick in layout),
        )
        for t, layout in enumerate(config.template_layouts)
    )
    return MarketplaceModel(
        advertisers=tuple(advertisers),
        query_classes=query_classes,
        true_click_params=tuple(config.true_click_params),
        templates=templates,
        participation=config.participation,
        bid_noise=config.bid_noise,
        pclick_bounds=config.pclick_bounds,
        seed=seed,
    )


def _apply_policy(record: AuctionData, policy: PolicyConfig) -> None:
    if policy.knobs:
        apply_setting(record, dict(policy.knobs))  # restorer dropped: the policy is the record's reality
    record.policy_params = PolicyConfig(knobs=dict(policy.knobs), schema_version=policy.schema_version)


def synthesize_request(
    model: MarketplaceModel,
    policy: PolicyConfig,
    index: int,
    seed: int,
) -> AuctionData:
    """Build request ``index`` of the stream and run the auction under ``policy``.

    Raw user/advertiser draws depend only on (seed, index), never on the
    policy, so the same request can be re-generated under a different policy
    for paired counterfactual comparisons.
    """
    rng = substream(seed, "request", index)
    n_adv = len(model.advertisers)
    cdf = model.arrival_cdf()
    u = rng.random()
    query_class = 0
    while query_class < len(cdf) - 1 and u > cdf[query_class]:
        query_class += 1
    entry_draws = rng.random(n_adv)
    bid_draws = rng.standard_normal(n_adv)
    entered = entry_draws < model.participation
    if not entered.any():
        relevance = model.query_classes[query_class].relevance
        entered[int(np.argmax(relevance))] = True

    pclicks = model.pclick_table()[query_class]
    bid_noise = model.bid_noise
    ads = []
    for adv_id in range(n_adv):
        if not entered[adv_id]:
            continue
        adv = model.advertisers[adv_id]
        pclick = pclicks[adv_id]
        ads.append(
            AdRecord(
                ad_id=adv_id,
                advertiser_id=adv_id,
                bid=adv.bid_mean * math.exp(bid_noise * bid_draws[adv_id]),
                pclick=pclick,
                quality=pclick,  # default quality policy: q = pclick
            )
        )
    record = AuctionData(
        request_id=index,
        query_class=query_class,
        ads=tuple(ads),
        policy_params=PolicyConfig(),
        page_templates=model.templates,
    )
    _apply_policy(record, policy)
    record.logged_allocation = run_auction(record)
    return record


def attach_sampled_clicks(model: MarketplaceModel, record: AuctionData, rng: np.random.Generator) -> None:
    """Draw Bernoulli click outcomes from the true click function onto the logged allocation."""
    alloc = record.logged_allocation
    assert alloc is not None
    adv_by_ad = {ad.ad_id: ad for ad in record.ads}
    placements = []
    for position, placement in enumerate(alloc.placements, start=1):
        ad = adv_by_ad[placement.ad_id]
        p_true = model.true_click_prob(record.query_class, ad.advertiser_id, position, ad.pclick)
        placements.append(
            PagePlacement(
                block=placement.block,
                slot=placement.slot,
                ad_id=placement.ad_id,
                rank_score=placement.rank_score,
                pricing_score=placement.pricing_score,
                pclick=placement.pclick,
                cpc=placement.cpc,
                clicked=bool(rng.random() < p_true),
            )
        )
    record.logged_allocation = PageAllocation(
        template_id=alloc.template_id, placements=tuple(placements), utility=alloc.utility
    )


def generate_logs(
    model: MarketplaceModel,
    policy: PolicyConfig,
    n_requests: int,
    drift: DriftSpec | None = None,
    seed: int = 0,
) -> LogDataset:
    """Emit ``n_requests`` logged auctions under the logging policy.

    Every record carries the allocation the auction engine actually produced
    and Bernoulli click outcomes drawn from the true click function. With a
    drift spec, records at/after the drift index are generated under the
    drifted policy instead.
    """
    if n_requests < 1:
        raise ConfigurationError("n_requests must be >= 1")
    records = []
    for i in range(n_requests):
        active = policy
        if drift is not None and i >= drift.drift_index:
            active = drift.drifted_policy
        record = synthesize_request(model, active, i, seed)
        attach_sampled_clicks(model, record, substream(seed, "clicks", i))
        records.append(record)
    return LogDataset(records=records, logging_policy=policy, drift_spec=drift)


def true_allocation_kpis(model: MarketplaceModel, record: AuctionData, alloc) -> tuple[int, int, float, float]:
    """(impressions, mainline, expected clicks, revenue) under true click probabilities.

    Only valid on marketplace-generated records, where ad_id doubles as the
    advertiser index."""
    expected_clicks = 0.0
    revenue = 0.0
    mainline = 0
    query_class = record.query_class
    for position, placement in enumerate(alloc.placements, start=1):
        p_true = model.true_click_prob(query_class, placement.ad_id, position, placement.pclick)
        expected_clicks += p_true
        revenue += p_true * placement.cpc
        if placement.block == "mainline":
            mainline += 1
    return len(alloc.placements), mainline, expected_clicks, revenue


def iter_true_kpis(
    model: MarketplaceModel,
    policy: PolicyConfig,
    n_requests: int,
    seed: int,
    start: int = 0,
) -> Iterator[KpiRecord]:
    """Per-request KPI ingredients computed with the true click probabilities."""
    for i in range(start, start + n_requests):
        record = synthesize_request(model, policy, i, seed)
        alloc = record.logged_allocation
        impressions, mainline, expected_clicks, revenue = true_allocation_kpis(model, record, alloc)
        yield KpiRecord(
            grid_id=0,
            setting={},
            request_id=record.request_id,
            query_class=record.query_class,
            impressions=impressions,
            mainline_impressions=mainline,
            expected_clicks=expected_clicks,
            revenue=revenue,
        )


def ground_truth_kpi(
    model: MarketplaceModel,
    policy: PolicyConfig,
    n_requests: int,
    seed: int,
    dims: Sequence[str] = ("grid_point_id", "query_class"),
):
    """Oracle KPI cube: the same generator, scored with true click probabilities."""
    from .cube import merge_cubes, request_cube  # local import to avoid a module cycle

    cube = None
    for kpi in iter_true_kpis(model, policy, n_requests, seed):
        single = request_cube(kpi, dims)
        cube = single if cube is None else merge_cubes(cube, single)
    assert cube is not None
    return cube


# ---------------------------------------------------------------------------
# paired oracle deltas with standard errors

_METRIC_NAMES = ("rpm", "cy", "iy", "mliy", "cpc")


@dataclass(frozen=True)
class OracleDelta:
    delta: float
    se: float


def paired_true_kpis(
    model: MarketplaceModel,
    treatment: PolicyConfig,
    baseline: PolicyConfig,
    n_requests: int,
    seed: int,
    start: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-request (revenue, clicks, impressions, mainline) under both policies.

    Each request is synthesized once under the baseline policy and mutated in
    place to the treatment assignment, so rows are exactly paired.
    """
    from .auction import apply_setting, run_auction  # deferred: marketplace is imported by auction's callers

    t = np.empty((n_requests, 4))
    b = np.empty((n_requests, 4))
    # knobs the baseline sets but the treatment leaves implicit revert to registry defaults
    setting = {k: KNOB_REGISTRY[k] for k in baseline.knobs}
    setting.update(treatment.knobs)
    if setting.get("mainline_capacity", 0.0) < 0 and "mainline_capacity" in baseline.knobs:
        raise ConfigurationError(
            "cannot pair policies where only the baseline overrides mainline_capacity"
        )
    for row, i in enumerate(range(start, start + n_requests)):
        record = synthesize_request(model, baseline, i, seed)
        imp, ml, clicks, rev = true_allocation_kpis(model, record, record.logged_allocation)
        b[row] = (rev, clicks, imp, ml)
        restorer = apply_setting(record, setting)
        alloc_t = run_auction(record)
        imp, ml, clicks, rev = true_allocation_kpis(model, record, alloc_t)
        t[row] = (rev, clicks, imp, ml)
        restorer.restore()
    return t, b


def true_delta_with_se(
    model: MarketplaceModel,
    treatment: PolicyConfig,
    baseline: PolicyConfig,
    n_requests: int,
    seed: int,
) -> dict[str, OracleDelta]:
    """Paired oracle KPI deltas (treatment vs baseline on identical traffic).

    Deltas are normalized differences of aggregate metrics; standard errors
    come from the delta method over per-request (treatment, baseline) pairs.
    """
    t, b = paired_true_kpis(model, treatment, baseline, n_requests, seed)
    out: dict[str, OracleDelta] = {}
    # rpm, cy, iy, mliy are all per-request means, so their deltas are plain ratios
    for name, col in (("rpm", 0), ("cy", 1), ("iy", 2), ("mliy", 3)):
        out[name] = _ratio_delta(t[:, col], b[:, col])
    out["cpc"] = _double_ratio_delta(t[:, 0], t[:, 1], b[:, 0], b[:, 1])
    return out


def _ratio_delta(x: np.ndarray, y: np.ndarray) -> OracleDelta:
    n = len(x)
    mx, my = x.mean(), y.mean()
    ratio = mx / my
    cov = np.cov(np.stack([x, y]), ddof=1)
    grad = np.array([1.0 / my, -mx / my**2])
    var = grad @ cov @ grad / n
    return OracleDelta(delta=float(ratio - 1.0), se=float(np.sqrt(max(var, 0.0))))


def _double_ratio_delta(x1, x2, y1, y2) -> OracleDelta:
    n = len(x1)
    m = np.array([x1.mean(), x2.mean(), y1.mean(), y2.mean()])
    g = (m[0] / m[1]) / (m[2] / m[3])
    cov = np.cov(np.stack([x1, x2, y1, y2]), ddof=1)
    grad = np.array([g / m[0], -g / m[1], -g / m[2], g / m[3]])
    var = grad @ cov @ grad / n
    return OracleDelta(delta=float(g - 1.0), se=float(np.sqrt(max(var, 0.0))))
