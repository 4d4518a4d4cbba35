"""Head-to-head protocol: replay estimator vs importance sampling.

Each data interval collects randomized logs; in the drift scenario a
background policy update rolls out at the 3/4 mark of every interval and
stays active into the next one. Tuning round k predicts the counterfactual
delta from interval k's full logs (historical mode) or from the next
interval's post-rollout window (regression mode, the A/B control slice) and
is scored against the ground-truth delta of that window. The open-box
replay corrects every logged record to the rolled-out policy; the
closed-box estimator consumes the stale mixture as-is. The marketplace
itself also drifts across intervals, which separates the two modes even
without policy events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .auction import GridPoint, simulate_request
from .click_model import impressions_from_logs, probit_train
from .cube import cube_results, kpi_report
from .errors import ConfigurationError
from .importance import (
    KnobGaussian,
    RandomizationSpec,
    generate_randomized_logs,
    is_kpi_estimates,
    plain_kpi_means,
    point_proposal,
)
from .marketplace import GeneratorConfig, MarketplaceModel, generate_marketplace, paired_true_kpis
from .records import DriftSpec, PolicyConfig
from .seeds import derive_seed

COMPARISON_METRICS = ("rpm", "mliy", "cy", "cpc")
ESTIMATORS = ("IS", "Replay")
MODES = ("historical", "regression")


@dataclass
class ScenarioConfig:
    mode: str = "drift"  # "stationary" | "drift"
    rounds: int = 5
    seeds: tuple[int, ...] = (11, 17, 23)
    n_train: int = 3000
    n_eval: int = 6000
    randomized_knob: str = "reserve_score"
    theta0: float = 0.30
    theta_stddev: float = 0.035
    proposals: tuple[float, ...] = (0.345, 0.26, 0.34, 0.265, 0.335)
    base_knobs: dict[str, float] = field(default_factory=dict)
    drift_knob: str = "mainline_capacity"
    drift_start: float = 3.0
    drift_step: float = -0.5
    drift_values: tuple[float, ...] | None = (3, 3, 2, 2, 1, 1, 1)
    market_bid_drift: float = -0.12
    market_quality_drift: float = 0.03

    def __post_init__(self):
        if self.mode not in ("stationary", "drift"):
            raise ConfigurationError(f"mode must be stationary or drift, got {self.mode!r}")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one seed required")
        if self.randomized_knob in self.base_knobs or self.randomized_knob == self.drift_knob:
            raise ConfigurationError("randomized knob must be distinct from base and drift knobs")

    def regime(self, interval: int) -> float:
        """Drift-knob value rolled out at the start of the given data interval."""
        if self.drift_values is not None:
            return float(self.drift_values[min(interval - 1, len(self.drift_values) - 1)])
        return self.drift_start + (interval - 1) * self.drift_step

    def base_policy(self, interval: int) -> PolicyConfig:
        knobs = dict(self.base_knobs)
        if self.mode == "drift":
            knobs[self.drift_knob] = self.regime(interval)
        return PolicyConfig(knobs)

    def randomization(self) -> RandomizationSpec:
        return RandomizationSpec(
            knobs={self.randomized_knob: KnobGaussian(mean=self.theta0, stddev=self.theta_stddev)}
        )

    def proposal_value(self, round_idx: int) -> float:
        return self.proposals[(round_idx - 1) % len(self.proposals)]


def interval_marketplace(model: MarketplaceModel, interval: int, scenario: ScenarioConfig) -> MarketplaceModel:
    """Slow user/advertiser drift across intervals: bids and base quality creep."""
    if interval == 1:
        return model
    bid_factor = (1.0 + scenario.market_bid_drift) ** (interval - 1)
    quality_factor = (1.0 + scenario.market_quality_drift) ** (interval - 1)
    advertisers = tuple(
        replace(
            adv,
            bid_mean=adv.bid_mean * bid_factor,
            bid_stddev=adv.bid_stddev * bid_factor,
            base_quality=float(np.clip(adv.base_quality * quality_factor, 0.02, 0.95)),
        )
        for adv in model.advertisers
    )
    return replace(model, advertisers=advertisers)


def _oracle_delta(
    model: MarketplaceModel,
    segments: Sequence[tuple[int, int, PolicyConfig]],
    knob: str,
    theta_t: float,
    theta_b: float,
    seed: int,
) -> dict[str, float]:
    """Paired ground-truth deltas over a (possibly mid-drift) evaluation interval."""
    t = np.zeros(4)
    b = np.zeros(4)
    for start, count, policy in segments:
        seg_t, seg_b = paired_true_kpis(
            model,
            policy.updated({knob: theta_t}),
            policy.updated({knob: theta_b}),
            count,
            seed,
            start=start,
        )
        t += seg_t.sum(axis=0)
        b += seg_b.sum(axis=0)
    return {
        "rpm": t[0] / b[0] - 1.0,
        "cy": t[1] / b[1] - 1.0,
        "mliy": t[3] / b[3] - 1.0,
        "cpc": (t[0] / t[1]) / (b[0] / b[1]) - 1.0,
    }


def _replay_deltas(records, click_model, knob: str, theta_t: float, theta_b: float, extra: dict[str, float]):
    grid = [
        GridPoint(id=1, setting={**extra, knob: theta_b}),
        GridPoint(id=2, setting={**extra, knob: theta_t}),
    ]
    results = []
    for record in records:
        results.extend(simulate_request(record, grid, model=click_model))
    cube, errors = cube_results(results, dims=("grid_point_id",))
    if errors:
        raise ConfigurationError(f"{errors} replay results errored during comparison")
    rows = kpi_report(cube, baseline_grid_id=1)
    for row in rows:
        if row.grid_point_id == 2:
            assert row.deltas is not None
            return {m: row.deltas.get(m) for m in COMPARISON_METRICS}
    raise ConfigurationError("treatment grid point missing from replay cube")


@dataclass
class ComparisonResult:
    scenario: ScenarioConfig
    mae: dict[tuple[str, str], dict[str, float]]
    per_round: list[dict] = field(default_factory=list)

    def render(self) -> str:
        lines = [f"scenario: {self.scenario.mode} ({self.scenario.rounds} rounds, {len(self.scenario.seeds)} seeds)"]
        header = f"{'Method':<22}" + "".join(f"{m.upper():>9}" for m in COMPARISON_METRICS)
        lines.append(header)
        lines.append("-" * len(header))
        for mode in MODES:
            for estimator in ESTIMATORS:
                row = self.mae[(estimator, mode)]
                cells = "".join(f"{100 * row[m]:>8.2f}%" for m in COMPARISON_METRICS)
                lines.append(f"{estimator + ' (' + mode + ')':<22}{cells}")
        return "\n".join(lines)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.render())
            fh.write("\n")


def compare_estimators(model: MarketplaceModel, scenario: ScenarioConfig) -> ComparisonResult:
    """Run the full multi-round protocol and report mean absolute errors.

    For every round k: the historical prediction comes from interval k's full
    logs, the regression prediction from interval k+1's post-rollout window,
    and both are scored against the ground-truth delta of that window.
    Reported cells are the mean absolute prediction error per metric over
    rounds and seeds.
    """
    spec = scenario.randomization()
    knob = scenario.randomized_knob
    rollout_at = (3 * scenario.n_train) // 4
    errors: dict[tuple[str, str], dict[str, list[float]]] = {
        (est, mode): {m: [] for m in COMPARISON_METRICS} for est in ESTIMATORS for mode in MODES
    }
    per_round = []

    for seed in scenario.seeds:
        intervals = {}
        for i in range(1, scenario.rounds + 2):
            market_i = interval_marketplace(model, i, scenario)
            base_policy = scenario.base_policy(i)
            if scenario.mode == "drift":
                drift = DriftSpec(
                    drift_index=rollout_at,
                    drifted_policy=base_policy.updated({scenario.drift_knob: scenario.regime(i + 1)}),
                )
            else:
                drift = None
            logs = generate_randomized_logs(
                market_i,
                spec,
                scenario.n_train,
                seed=derive_seed(seed, "train", i),
                base_policy=base_policy,
                drift=drift,
            )
            click_model = probit_train(impressions_from_logs(logs.records))
            # the A/B control slice: the pure-regime head, before this interval's own rollout
            window = logs.records[:rollout_at]
            window_model = probit_train(impressions_from_logs(window))
            intervals[i] = (market_i, logs, click_model, window, window_model)

        for k in range(1, scenario.rounds + 1):
            theta_star = scenario.proposal_value(k)
            ev = k + 1
            market_ev = intervals[ev][0]
            # evaluation happens right after round k's rollout, under the pure new regime
            eval_policy = scenario.base_policy(ev)
            actual = _oracle_delta(
                market_ev,
                [(0, scenario.n_eval, eval_policy)],
                knob,
                theta_star,
                scenario.theta0,
                seed=derive_seed(seed, "eval", ev),
            )

            for mode in MODES:
                if mode == "historical":
                    _, logs, click_model, _, _ = intervals[k]
                    records = logs.records
                    # the tuner knows the policy version that just rolled out
                    extra = {scenario.drift_knob: scenario.regime(ev)} if scenario.mode == "drift" else {}
                else:
                    _, _, _, records, click_model = intervals[ev]
                    extra = {}
                target = point_proposal(spec, {knob: theta_star})
                is_t = is_kpi_estimates(records, spec, target)
                is_b = plain_kpi_means(records)
                is_pred = {m: is_t[m] / is_b[m] - 1.0 for m in COMPARISON_METRICS}
                replay_pred = _replay_deltas(
                    records, click_model, knob, theta_star, scenario.theta0, extra
                )

                for m in COMPARISON_METRICS:
                    errors[("IS", mode)][m].append(abs(is_pred[m] - actual[m]))
                    errors[("Replay", mode)][m].append(abs(replay_pred[m] - actual[m]))
                per_round.append(
                    {
                        "seed": seed,
                        "round": k,
                        "mode": mode,
                        "theta_star": theta_star,
                        "actual": actual,
                        "is_pred": is_pred,
                        "replay_pred": replay_pred,
                    }
                )

    mae = {
        key: {m: float(np.mean(values[m])) for m in COMPARISON_METRICS}
        for key, values in errors.items()
    }
    return ComparisonResult(scenario=scenario, mae=mae, per_round=per_round)


def default_comparison_marketplace(seed: int = 404) -> MarketplaceModel:
    return generate_marketplace(GeneratorConfig(n_advertisers=10, n_query_classes=3), seed)
