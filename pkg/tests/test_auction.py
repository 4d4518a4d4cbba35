import math

import numpy as np
import pytest

from genie import (
    ConfigurationError,
    GridPoint,
    PolicyConfig,
    baseline_grid_point,
    generate_logs,
    generate_modifiers,
    replay_check,
    run_auction,
    simulate_request,
)
from genie.records import AdRecord, AuctionData, BlockSpec, PageTemplate


def make_request(ads, templates=None, knobs=None, request_id=1):
    templates = templates or (
        PageTemplate(template_id=0, blocks=(BlockSpec("mainline", 1),)),
    )
    return AuctionData(
        request_id=request_id,
        query_class=0,
        ads=tuple(ads),
        policy_params=PolicyConfig(dict(knobs or {})),
        page_templates=tuple(templates),
    )


def ad(ad_id, bid, pclick, quality=None):
    return AdRecord(
        ad_id=ad_id,
        advertiser_id=ad_id,
        bid=bid,
        pclick=pclick,
        quality=pclick if quality is None else quality,
    )


# ---------------------------------------------------------------------------
# brute-force reference allocator: greedy fill per template, exhaustive max

def brute_force_auction(data):
    reserve = data.policy_params.get("reserve_score")
    order = sorted(data.ads, key=lambda a: (-(a.bid * a.quality), a.ad_id))

    def eligible(a, block, used):
        return (
            a.ad_id not in used
            and a.bid * a.quality >= reserve
            and a.pclick >= block.min_pclick
        )

    pages = []
    for template in data.page_templates:
        used = set()
        placements = []
        utility = 0.0
        for block in template.blocks:
            for slot in range(block.capacity):
                winners = [a for a in order if eligible(a, block, used)]
                if not winners:
                    break
                winner = winners[0]
                used.add(winner.ad_id)
                runners = [a for a in order if eligible(a, block, used)]
                pricing = runners[0].bid * runners[0].quality if runners else reserve
                cpc = 0.0 if winner.quality <= 0 else min(max(pricing / winner.quality, 0.0), winner.bid)
                placements.append(
                    (block.name, slot, winner.ad_id, winner.bid * winner.quality, pricing, winner.pclick, cpc)
                )
                utility += winner.bid * winner.quality
        pages.append((template.template_id, tuple(placements), utility))
    best = max(pages, key=lambda p: (p[2], -p[0]))
    return best


def random_instance(rng, request_id):
    n_ads = rng.integers(1, 6)
    ads = []
    for i in range(n_ads):
        pclick = float(rng.uniform(0.02, 0.95))
        ads.append(ad(i, float(rng.uniform(0.1, 3.0)), pclick))
    n_templates = rng.integers(1, 4)
    templates = []
    for t in range(n_templates):
        blocks = []
        for name in ("mainline", "sidebar")[: rng.integers(1, 3)]:
            blocks.append(
                BlockSpec(
                    name=name,
                    capacity=int(rng.integers(0, 4)),
                    min_pclick=float(rng.choice([0.0, 0.1, 0.3])),
                )
            )
        templates.append(PageTemplate(template_id=t, blocks=tuple(blocks)))
    knobs = {"reserve_score": float(rng.choice([0.0, 0.05, 0.3]))}
    return make_request(ads, templates, knobs, request_id=request_id)


def assert_matches_brute_force(data):
    got = run_auction(data)
    template_id, placements, utility = brute_force_auction(data)
    assert got.template_id == template_id
    assert got.utility == pytest.approx(utility, abs=0)
    assert [
        (p.block, p.slot, p.ad_id, p.rank_score, p.pricing_score, p.pclick, p.cpc)
        for p in got.placements
    ] == list(placements)


def test_gsp_oracle_equivalence_sample():
    rng = np.random.default_rng(1234)
    for i in range(200):
        assert_matches_brute_force(random_instance(rng, i))


def test_hand_enumerated_two_ad_auction():
    data = make_request([ad(0, 2.0, 0.1), ad(1, 1.0, 0.1)])
    alloc = run_auction(data)
    assert len(alloc.placements) == 1
    p = alloc.placements[0]
    assert p.ad_id == 0
    assert p.pricing_score == pytest.approx(0.1)
    assert p.cpc == pytest.approx(1.0)


def test_single_ad_zero_reserve_prices_at_zero():
    alloc = run_auction(make_request([ad(0, 2.0, 0.5)]))
    assert alloc.placements[0].pricing_score == 0.0
    assert alloc.placements[0].cpc == 0.0


def test_no_eligible_ads_gives_empty_allocation():
    data = make_request([ad(0, 1.0, 0.1)], knobs={"reserve_score": 5.0})
    alloc = run_auction(data)
    assert alloc.placements == ()
    assert alloc.utility == 0.0


def test_gsp_rationality_and_slot_monotonicity(small_logs):
    for record in small_logs.records[:200]:
        alloc = run_auction(record)
        by_block = {}
        for p in alloc.placements:
            assert 0.0 <= p.cpc <= max(a.bid for a in record.ads) + 1e-12
            bid = next(a.bid for a in record.ads if a.ad_id == p.ad_id)
            assert p.cpc <= bid + 1e-12
            assert p.pricing_score <= p.rank_score + 1e-12
            by_block.setdefault(p.block, []).append(p.rank_score)
        for scores in by_block.values():
            assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_uniform_bid_scaling_preserves_order_and_scales_prices():
    ads = [ad(0, 2.0, 0.3), ad(1, 1.5, 0.5), ad(2, 0.7, 0.8)]
    templates = (PageTemplate(0, (BlockSpec("mainline", 2), BlockSpec("sidebar", 1))),)
    base = run_auction(make_request(ads, templates))
    scaled_ads = [ad(a.ad_id, a.bid * 4.0, a.pclick) for a in ads]
    scaled = run_auction(make_request(scaled_ads, templates))
    assert [p.ad_id for p in base.placements] == [p.ad_id for p in scaled.placements]
    for b, s in zip(base.placements, scaled.placements):
        assert s.pricing_score == pytest.approx(4.0 * b.pricing_score, rel=1e-12)
        assert s.cpc == pytest.approx(4.0 * b.cpc, rel=1e-12)


# ---------------------------------------------------------------------------
# modifiers

def test_empty_setting_is_identity(small_logs):
    record = small_logs.records[0]
    before = record.to_json_line()
    (modifier,) = generate_modifiers([baseline_grid_point()], record)
    restorer, setting = modifier.modify(record)
    assert setting == {}
    assert record.to_json_line() == before
    restorer.restore()
    assert record.to_json_line() == before


def test_bid_multiplier_doubles_every_bid(small_logs):
    record = small_logs.records[0]
    original = [a.bid for a in record.ads]
    (modifier,) = generate_modifiers([GridPoint(1, {"bid_multiplier": 2.0})], record)
    restorer, _ = modifier.modify(record)
    assert [a.bid for a in record.ads] == [b * 2.0 for b in original]
    restorer.restore()
    assert [a.bid for a in record.ads] == original


def test_modifiers_preserve_grid_order(small_logs):
    grid = [GridPoint(i, {"bid_multiplier": 1.0 + i / 100}) for i in range(1, 101)]
    modifiers = generate_modifiers(grid, small_logs.records[0])
    assert [m.grid_point.id for m in modifiers] == [gp.id for gp in grid]


def test_empty_grid_rejected(small_logs):
    with pytest.raises(ConfigurationError):
        generate_modifiers([], small_logs.records[0])


def test_restore_is_bit_identical_over_random_pairs(small_logs):
    rng = np.random.default_rng(99)
    knob_pool = ["bid_multiplier", "reserve_score", "quality_exponent", "mainline_capacity", "mainline_min_pclick"]
    for _ in range(500):
        record = small_logs.records[rng.integers(len(small_logs.records))]
        before = record.to_json_line()
        names = rng.choice(knob_pool, size=rng.integers(1, 4), replace=False)
        setting = {}
        for name in names:
            if name == "bid_multiplier":
                setting[name] = float(rng.uniform(0.2, 3.0))
            elif name == "mainline_capacity":
                setting[name] = float(rng.integers(0, 5))
            elif name == "quality_exponent":
                setting[name] = float(rng.uniform(0.5, 1.5))
            else:
                setting[name] = float(rng.uniform(0.0, 0.5))
        (modifier,) = generate_modifiers([GridPoint(1, setting)], record)
        restorer, _ = modifier.modify(record)
        run_auction(record)
        restorer.restore()
        assert record.to_json_line() == before


def test_grid_zero_reserved_for_baseline():
    with pytest.raises(ConfigurationError):
        GridPoint(0, {"bid_multiplier": 2.0})
    with pytest.raises(ConfigurationError):
        GridPoint(1, {"no_such_knob": 1.0})


# ---------------------------------------------------------------------------
# per-request simulation

def test_baseline_replay_reproduces_logged_allocation(small_logs):
    record = small_logs.records[0]
    results = simulate_request(record, [])
    assert len(results) == 1
    assert results[0].grid_id == 0
    replayed = run_auction(record)
    assert replayed.replay_key() == record.logged_allocation.replay_key()


def test_simulate_returns_results_in_grid_order_and_restores(small_logs):
    record = small_logs.records[3]
    before = record.to_json_line()
    grid = [GridPoint(i, {"bid_multiplier": 0.5 + i / 4}) for i in range(1, 6)]
    results = simulate_request(record, grid)
    assert [r.grid_id for r in results] == [0, 1, 2, 3, 4, 5]
    assert record.to_json_line() == before


def test_identity_grid_point_matches_baseline(small_logs):
    record = small_logs.records[5]
    results = simulate_request(record, [GridPoint(1, {"bid_multiplier": 1.0})])
    base, identity = results
    assert base.impressions == identity.impressions
    assert base.expected_clicks == identity.expected_clicks
    assert base.revenue == identity.revenue


def test_failing_grid_point_recorded_but_rest_evaluated(small_logs):
    record = small_logs.records[2]
    before = record.to_json_line()
    grid = [
        GridPoint(1, {"quality_exponent": math.nan}),  # produces invalid ad quality
        GridPoint(2, {"bid_multiplier": 1.2}),
    ]
    results = simulate_request(record, grid)
    assert results[1].error is not None
    assert results[2].error is None
    assert results[2].impressions > 0
    assert record.to_json_line() == before


def test_sampled_click_mode_needs_rng(small_logs):
    with pytest.raises(ConfigurationError):
        simulate_request(small_logs.records[0], [], click_mode="sampled")
    rng = np.random.default_rng(5)
    results = simulate_request(small_logs.records[0], [], click_mode="sampled", rng=rng)
    assert results[0].expected_clicks == int(results[0].expected_clicks)


# ---------------------------------------------------------------------------
# replay fidelity

def test_replay_check_is_exact_on_synthetic_logs(small_logs):
    accuracy = replay_check(small_logs)
    assert accuracy.accuracy == 1.0
    assert accuracy.total == len(small_logs.records)


def test_replay_check_detects_corruption(small_model):
    dataset = generate_logs(small_model, PolicyConfig(), 100, seed=13)
    victim = dataset.records[17]
    corrupted = victim.logged_allocation
    object.__setattr__(corrupted, "utility", corrupted.utility + 1.0)
    accuracy = replay_check(dataset)
    assert accuracy.total == 100
    assert accuracy.matched == 100  # utility is derived, not part of the replay key
    first = corrupted.placements[0]
    object.__setattr__(first, "pricing_score", first.pricing_score + 0.5)
    accuracy = replay_check(dataset)
    assert accuracy.matched == 99
    assert accuracy.accuracy == pytest.approx(0.99)
    assert accuracy.mismatched_ids == [victim.request_id]
