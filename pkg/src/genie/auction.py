"""Open-box GSP auction replay.

A logged request is re-run through the allocation logic as-is (baseline)
or after an in-place counterfactual mutation. Mutations are copy-on-write:
the restorer swaps the original immutable field values back, so apply ->
restore is bit-identical by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .click_model import impression_features
from .errors import ConfigurationError, SchemaError
from .records import (
    KNOB_REGISTRY,
    AdRecord,
    AuctionData,
    BlockSpec,
    LogDataset,
    PageAllocation,
    PagePlacement,
    PolicyConfig,
)

MAINLINE = "mainline"
BASELINE_GRID_ID = 0


@dataclass(frozen=True)
class GridPoint:
    """One concrete assignment of policy knobs to evaluate counterfactually."""

    id: int
    setting: dict[str, float]

    def __post_init__(self):
        unknown = sorted(set(self.setting) - set(KNOB_REGISTRY))
        if unknown:
            raise ConfigurationError(f"grid point {self.id}: unknown knobs {unknown}")
        if self.setting.get("bid_multiplier", 1.0) <= 0:
            raise ConfigurationError(f"grid point {self.id}: bid_multiplier must be > 0")
        if self.id == BASELINE_GRID_ID and self.setting:
            raise ConfigurationError("grid id 0 is reserved for the empty baseline setting")


def baseline_grid_point() -> GridPoint:
    return GridPoint(id=BASELINE_GRID_ID, setting={})


@dataclass
class Restorer:
    """Puts the original field values back onto the auction data."""

    _undo: Callable[[], None]

    def restore(self) -> None:
        self._undo()


def apply_setting(data: AuctionData, setting: dict[str, float]) -> Restorer:
    """Mutate auction data to match an absolute knob assignment.

    The bid multiplier is applied as a ratio against the record's generating
    multiplier, so setting a knob always means "what the data would look like
    had the system run with this value". Mutations swap in rebuilt immutable
    field values; the returned restorer swaps the originals back.
    """
    original = (data.ads, data.policy_params, data.page_templates)

    ads = data.ads
    templates = data.page_templates
    bid_factor = 1.0
    if "bid_multiplier" in setting:
        current = data.policy_params.get("bid_multiplier")
        if current <= 0:
            raise ConfigurationError("record has non-positive generating bid_multiplier")
        bid_factor = setting["bid_multiplier"] / current
    exponent = setting.get("quality_exponent")
    if bid_factor != 1.0 or exponent is not None:
        ads = tuple(
            AdRecord(
                ad_id=ad.ad_id,
                advertiser_id=ad.advertiser_id,
                bid=ad.bid * bid_factor,
                pclick=ad.pclick,
                quality=ad.pclick**exponent if exponent is not None else ad.quality,
                metadata=ad.metadata,
            )
            for ad in ads
        )
    if "mainline_capacity" in setting or "mainline_min_pclick" in setting:
        templates = tuple(
            replace(t, blocks=tuple(_mutate_block(b, setting) for b in t.blocks))
            for t in templates
        )

    data.ads = ads
    data.page_templates = templates
    data.policy_params = data.policy_params.updated(dict(setting))

    def undo(record=data, snapshot=original):
        record.ads, record.policy_params, record.page_templates = snapshot

    return Restorer(undo)


@dataclass
class Modifier:
    """Pairs a grid point with its in-place mutation of auction data."""

    grid_point: GridPoint

    def modify(self, data: AuctionData) -> tuple[Restorer, dict[str, float]]:
        return apply_setting(data, self.grid_point.setting), dict(self.grid_point.setting)


def _mutate_block(block: BlockSpec, setting: dict[str, float]) -> BlockSpec:
    if block.name != MAINLINE:
        return block
    capacity = block.capacity
    if "mainline_capacity" in setting and setting["mainline_capacity"] >= 0:
        capacity = int(round(setting["mainline_capacity"]))
    min_pclick = block.min_pclick
    if "mainline_min_pclick" in setting:
        min_pclick = setting["mainline_min_pclick"]
    return BlockSpec(name=block.name, capacity=capacity, min_pclick=min_pclick)


def generate_modifiers(grid: Sequence[GridPoint], data: AuctionData) -> list[Modifier]:
    """One modifier per grid point, in grid order."""
    if not grid:
        raise ConfigurationError("grid must be non-empty")
    del data  # mutations are resolved lazily against whatever record they are applied to
    return [Modifier(grid_point=gp) for gp in grid]


# ---------------------------------------------------------------------------
# allocation

def run_auction(data: AuctionData) -> PageAllocation:
    """Allocate ads to the best page template under generalized second pricing.

    Ads are ranked by bid * quality. Each template is filled greedily, block
    by block in significance order; a slot's pricing score is the next
    eligible ad's rank score (the reserve score when there is none) and the
    winner pays pricing_score / quality per click, clamped to its bid.
    The template with the highest total placed utility wins, ties going to
    the lowest template id. No eligible ads is a valid empty allocation.
    """
    if not data.page_templates:
        raise SchemaError(f"request {data.request_id}: no page templates")
    reserve = data.policy_params.get("reserve_score")
    ranked = sorted(data.ads, key=lambda ad: (-ad.bid * ad.quality, ad.ad_id))
    ranks = [ad.bid * ad.quality for ad in ranked]

    best_fill: list[tuple[str, int, int, float]] | None = None
    best_utility = 0.0
    best_template = -1
    for template in data.page_templates:
        fill: list[tuple[str, int, int, float]] = []  # (block, slot, ranked idx, pricing)
        placed: set[int] = set()
        utility = 0.0
        for block in template.blocks:
            min_pclick = block.min_pclick
            for slot in range(block.capacity):
                winner_idx = _first_eligible(ranked, ranks, placed, reserve, min_pclick, 0, -1)
                if winner_idx is None:
                    break
                winner = ranked[winner_idx]
                runnerup_idx = _first_eligible(
                    ranked, ranks, placed, reserve, min_pclick, winner_idx + 1, winner.ad_id
                )
                pricing = reserve if runnerup_idx is None else ranks[runnerup_idx]
                fill.append((block.name, slot, winner_idx, pricing))
                placed.add(winner.ad_id)
                utility += ranks[winner_idx]
        if (
            best_fill is None
            or utility > best_utility
            or (utility == best_utility and template.template_id < best_template)
        ):
            best_fill, best_utility, best_template = fill, utility, template.template_id

    assert best_fill is not None
    placements = []
    for block_name, slot, idx, pricing in best_fill:
        winner = ranked[idx]
        cpc = 0.0 if winner.quality <= 0 else pricing / winner.quality
        if cpc < 0.0:
            cpc = 0.0
        elif cpc > winner.bid:
            cpc = winner.bid
        placements.append(
            PagePlacement(
                block=block_name,
                slot=slot,
                ad_id=winner.ad_id,
                rank_score=ranks[idx],
                pricing_score=pricing,
                pclick=winner.pclick,
                cpc=cpc,
            )
        )
    return PageAllocation(
        template_id=best_template,
        placements=tuple(placements),
        utility=best_utility,
    )


def _first_eligible(
    ranked: list[AdRecord],
    ranks: list[float],
    placed: set[int],
    reserve: float,
    min_pclick: float,
    start: int,
    skip_id: int,
) -> int | None:
    for idx in range(start, len(ranked)):
        ad = ranked[idx]
        if ad.ad_id in placed or ad.ad_id == skip_id:
            continue
        if ranks[idx] < reserve:
            # ranked is sorted by rank score, nothing further can qualify
            return None
        if ad.pclick < min_pclick:
            continue
        return idx
    return None


# ---------------------------------------------------------------------------
# per-request simulation

@dataclass
class KpiRecord:
    """Raw per-request KPI ingredients for one grid point."""

    grid_id: int
    setting: dict[str, float]
    request_id: int
    query_class: int
    impressions: int = 0
    mainline_impressions: int = 0
    expected_clicks: float = 0.0
    revenue: float = 0.0
    error: str | None = None


def _ensure_baseline(grid: Sequence[GridPoint]) -> list[GridPoint]:
    points = list(grid)
    for gp in points:
        if gp.id == BASELINE_GRID_ID:
            return points
    return [baseline_grid_point()] + points


def allocation_kpis(
    allocation: PageAllocation,
    pclicks: Sequence[float],
) -> tuple[int, int, float, float]:
    impressions = len(allocation.placements)
    mainline = sum(1 for p in allocation.placements if p.block == MAINLINE)
    expected_clicks = float(sum(pclicks))
    revenue = float(sum(p_hat * p.cpc for p_hat, p in zip(pclicks, allocation.placements)))
    return impressions, mainline, expected_clicks, revenue


def simulate_request(
    data: AuctionData,
    grid: Sequence[GridPoint],
    model=None,
    click_mode: str = "expected",
    rng: np.random.Generator | None = None,
) -> list[KpiRecord]:
    """Replay one request under every grid point and score the outcomes.

    The reserved baseline point (id 0, empty setting) is prepended when the
    grid does not already carry it. Each grid point runs modify -> auction ->
    click re-calibration -> KPI -> restore; a failing point is recorded with
    its error and the remaining points still run. The input record is left
    bit-identical afterwards.

    ``model`` is any object with ``predict_impression(features) -> float``;
    when None the logged click scores are kept. ``click_mode="sampled"``
    draws Bernoulli clicks from the calibrated scores (requires ``rng``).
    """
    if click_mode not in ("expected", "sampled"):
        raise ConfigurationError(f"unknown click_mode {click_mode!r}")
    if click_mode == "sampled" and rng is None:
        raise ConfigurationError("click_mode='sampled' requires an rng")

    results: list[KpiRecord] = []
    for modifier in generate_modifiers(_ensure_baseline(grid), data):
        gp = modifier.grid_point
        record = KpiRecord(
            grid_id=gp.id,
            setting=dict(gp.setting),
            request_id=data.request_id,
            query_class=data.query_class,
        )
        try:
            restorer, _setting = modifier.modify(data)
        except Exception as exc:  # noqa: BLE001 - per-point failures must not stop the loop
            record.error = str(exc)
            results.append(record)
            continue
        try:
            allocation = run_auction(data)
            pclicks = []
            for position, placement in enumerate(allocation.placements, start=1):
                if model is None:
                    p_hat = placement.pclick
                else:
                    p_hat = model.predict_impression(
                        impression_features(data.query_class, placement.block, position, placement.pclick)
                    )
                if click_mode == "sampled":
                    p_hat = float(rng.random() < p_hat)
                pclicks.append(p_hat)
            (
                record.impressions,
                record.mainline_impressions,
                record.expected_clicks,
                record.revenue,
            ) = allocation_kpis(allocation, pclicks)
        except Exception as exc:  # noqa: BLE001
            record.error = str(exc)
        finally:
            restorer.restore()
        results.append(record)
    return results


# ---------------------------------------------------------------------------
# replay fidelity

@dataclass
class SimulationAccuracy:
    total: int
    matched: int
    mismatched_ids: list[int] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            return 1.0
        return self.matched / self.total


def replay_check(dataset: LogDataset | Sequence[AuctionData], max_reported: int = 20) -> SimulationAccuracy:
    """Fraction of records whose baseline replay reproduces the logged allocation."""
    records = dataset.records if isinstance(dataset, LogDataset) else dataset
    total = 0
    matched = 0
    mismatched: list[int] = []
    for record in records:
        if record.logged_allocation is None:
            raise SchemaError(f"request {record.request_id}: no logged allocation to check against")
        total += 1
        replayed = run_auction(record)
        if replayed.replay_key() == record.logged_allocation.replay_key():
            matched += 1
        elif len(mismatched) < max_reported:
            mismatched.append(record.request_id)
    return SimulationAccuracy(total=total, matched=matched, mismatched_ids=mismatched)
