"""End-to-end job orchestration from a single config file.

A job config declares which stages run (generate, ingest, train-click,
simulate, report, explore, compare), the artifact paths, and every stage's
parameters. Stages run in the declared order; each one persists its outputs
so any later stage can be re-run standalone from disk. All randomness flows
from one root seed through named substreams, so re-running an identical
config reproduces every artifact byte for byte.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .auction import GridPoint, replay_check, simulate_request
from .boosting import GbtParams, gbt_train
from .click_model import (
    build_binning_spec,
    impressions_from_logs,
    load_click_model,
    probit_train,
    save_click_model,
)
from .comparison import ScenarioConfig, compare_estimators
from .cube import DEFAULT_DIMS, DataCube, cube_results, empty_cube, kpi_report, merge_cubes, read_report, write_report
from .errors import ConfigurationError, GenieError
from .explore import Constraint, ExploreParams, Objective, optimize, surrogate_dataset_from_report
from .importance import KnobGaussian, RandomizationSpec
from .marketplace import GeneratorConfig, MarketplaceModel, generate_logs, generate_marketplace
from .records import AuctionData, DriftSpec, PolicyConfig, load_log_file, write_log_file
from .seeds import derive_seed, draw_root_seed

STAGES = ("generate", "ingest", "train-click", "simulate", "report", "explore", "compare")


def default_workers() -> int:
    raw = os.environ.get("GENIE_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class JobConfig:
    stages: list[str]
    seed: int
    output_dir: Path
    workers: int = 1
    # generate
    marketplace: dict | None = None
    logging_policy: dict = field(default_factory=dict)
    n_requests: int = 1000
    drift: dict | None = None
    # shared artifact paths (relative to output_dir unless absolute)
    marketplace_path: str = "marketplace.json"
    logs_path: str = "logs.jsonl"
    model_path: str = "click_model.json"
    cube_path: str = "cube.json"
    report_path: str = "report.tsv"
    grid_path: str = "grid.jsonl"
    recommended_path: str = "recommended_grid.jsonl"
    comparison_path: str = "comparison.txt"
    # stage parameters
    traffic_filter: dict | None = None
    click_model: dict = field(default_factory=lambda: {"kind": "probit"})
    grid: dict | None = None
    cube_dims: tuple[str, ...] = DEFAULT_DIMS
    baseline_grid_id: int = 0
    explore: dict | None = None
    compare: dict | None = None

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.output_dir / p

    @classmethod
    def from_file(cls, config_path) -> "JobConfig":
        config_path = Path(config_path).resolve()
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        unknown = set(raw) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown job config fields: {sorted(unknown)}")
        raw.setdefault("output_dir", str(config_path.parent))
        raw["output_dir"] = Path(raw["output_dir"])
        if not raw["output_dir"].is_absolute():
            raw["output_dir"] = config_path.parent / raw["output_dir"]
        if "cube_dims" in raw:
            raw["cube_dims"] = tuple(raw["cube_dims"])
        if "seed" not in raw:
            raise ConfigurationError("job config must declare a seed")
        return cls(**raw)

    def validate(self) -> None:
        for stage in self.stages:
            if stage not in STAGES:
                raise ConfigurationError(f"unknown stage {stage!r}; valid: {STAGES}")
        if not self.stages:
            raise ConfigurationError("job config declares no stages")
        if "generate" in self.stages and self.marketplace is None:
            raise ConfigurationError("generate stage requires a marketplace section")
        produces_logs = "generate" in self.stages
        needs_logs = {"ingest", "train-click", "simulate"} & set(self.stages)
        if needs_logs and not produces_logs and not self.path(self.logs_path).exists():
            raise ConfigurationError(f"logs file not found: {self.path(self.logs_path)}")
        if "simulate" in self.stages:
            if "train-click" not in self.stages and not self.path(self.model_path).exists():
                raise ConfigurationError(f"click model not found: {self.path(self.model_path)}")
            if self.grid is None:
                raise ConfigurationError("simulate stage requires a grid section")
            sources = [k for k in ("inline", "file", "from_explorer") if k in self.grid]
            if len(sources) != 1:
                raise ConfigurationError(f"exactly one grid source required, got {sources}")
            source = sources[0]
            if source == "file" and not Path(self.grid["file"]).exists():
                raise ConfigurationError(f"grid file not found: {self.grid['file']}")
            if source == "from_explorer" and "explore" not in self.stages:
                path = self.path(self.grid["from_explorer"])
                if not path.exists():
                    raise ConfigurationError(f"recommended grid not found: {path}")
        if "report" in self.stages and "simulate" not in self.stages:
            if not self.path(self.cube_path).exists():
                raise ConfigurationError(f"cube file not found: {self.path(self.cube_path)}")
        if "explore" in self.stages:
            if self.explore is None:
                raise ConfigurationError("explore stage requires an explore section")
            if "report" not in self.stages and not self.path(self.report_path).exists():
                raise ConfigurationError(f"report file not found: {self.path(self.report_path)}")
        if "compare" in self.stages and self.compare is None:
            raise ConfigurationError("compare stage requires a compare section")


@dataclass
class JobSummary:
    seed: int
    conversion_success: float | None = None
    simulation_accuracy: float | None = None
    stage_seconds: dict[str, float] = field(default_factory=dict)
    record_count: int | None = None
    grid_count: int | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "conversion_success": self.conversion_success,
            "simulation_accuracy": self.simulation_accuracy,
            "stage_seconds": self.stage_seconds,
            "record_count": self.record_count,
            "grid_count": self.grid_count,
            "artifacts": dict(sorted(self.artifacts.items())),
            "failed_stage": self.failed_stage,
            "error": self.error,
        }


# ---------------------------------------------------------------------------
# grid files

def write_grid_file(points: Sequence[GridPoint], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for gp in points:
            fh.write(json.dumps({"id": gp.id, "setting": gp.setting}, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_grid_file(path) -> list[GridPoint]:
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            points.append(GridPoint(id=int(payload["id"]), setting=dict(payload["setting"])))
    return points


def _grid_from_settings(settings: Sequence[dict[str, float]]) -> list[GridPoint]:
    return [GridPoint(id=i + 1, setting=dict(s)) for i, s in enumerate(settings)]


# ---------------------------------------------------------------------------
# record filtering and parallel simulation

def apply_traffic_filter(records: list[AuctionData], traffic_filter: dict | None) -> list[AuctionData]:
    if not traffic_filter:
        return records
    out = records
    classes = traffic_filter.get("query_classes")
    if classes is not None:
        allowed = set(classes)
        out = [r for r in out if r.query_class in allowed]
    rng = traffic_filter.get("request_range")
    if rng is not None:
        lo, hi = rng
        out = [r for r in out if lo <= r.request_id < hi]
    return out


def _simulate_chunk(args) -> tuple[dict, int]:
    records, grid, model, dims = args
    results = []
    for record in records:
        results.extend(simulate_request(record, grid, model=model))
    cube, errors = cube_results(results, dims)
    return cube.to_dict(), errors


def simulate_records(
    records: Sequence[AuctionData],
    grid: Sequence[GridPoint],
    model,
    dims: Sequence[str] = DEFAULT_DIMS,
    workers: int = 1,
) -> tuple[DataCube, int]:
    """Replay every record under the grid and fold outcomes into one cube.

    Workers each own a slice of the request stream; partial cubes merge
    exactly, so the result is identical for any worker count.
    """
    if workers <= 1 or len(records) < 2 * workers:
        results = []
        for record in records:
            results.extend(simulate_request(record, grid, model=model))
        return cube_results(results, dims)
    chunk_size = (len(records) + workers - 1) // workers
    chunks = [
        (list(records[i : i + chunk_size]), list(grid), model, tuple(dims))
        for i in range(0, len(records), chunk_size)
    ]
    cube = empty_cube(dims)
    errors = 0
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for cube_dict, chunk_errors in pool.map(_simulate_chunk, chunks):
            cube = merge_cubes(cube, DataCube.from_dict(cube_dict))
            errors += chunk_errors
    return cube, errors


# ---------------------------------------------------------------------------
# stages

def _stage_generate(cfg: JobConfig, ctx: dict, summary: JobSummary) -> None:
    gen_cfg = GeneratorConfig(**cfg.marketplace)
    model = generate_marketplace(gen_cfg, derive_seed(cfg.seed, "marketplace"))
    policy = PolicyConfig(dict(cfg.logging_policy))
    drift = None
    if cfg.drift is not None:
        drift = DriftSpec(
            drift_index=int(cfg.drift["drift_index"]),
            drifted_policy=PolicyConfig(dict(cfg.drift["policy"])),
        )
    dataset = generate_logs(model, policy, cfg.n_requests, drift=drift, seed=derive_seed(cfg.seed, "logs"))
    model.save(cfg.path(cfg.marketplace_path))
    write_log_file(dataset.records, cfg.path(cfg.logs_path))
    ctx["marketplace"] = model
    ctx["records"] = dataset.records
    summary.artifacts["marketplace"] = str(cfg.path(cfg.marketplace_path))
    summary.artifacts["logs"] = str(cfg.path(cfg.logs_path))
    summary.record_count = len(dataset.records)


def _load_records(cfg: JobConfig, ctx: dict, summary: JobSummary) -> list[AuctionData]:
    if "records" not in ctx:
        records, stats = load_log_file(cfg.path(cfg.logs_path))
        ctx["records"] = records
        summary.conversion_success = stats.conversion_success
    return apply_traffic_filter(ctx["records"], cfg.traffic_filter)


def _stage_ingest(cfg: JobConfig, ctx: dict, summary: JobSummary) -> None:
    records, stats = load_log_file(cfg.path(cfg.logs_path))
    ctx["records"] = records
    summary.conversion_success = stats.conversion_success
    summary.record_count = len(records)


def _stage_train_click(cfg: JobConfig, ctx: dict, summary: JobSummary) -> None:
    records = _load_records(cfg, ctx, summary)
    impressions = impressions_from_logs(records)
    params = dict(cfg.click_model)
    kind = params.pop("kind", "probit")
    if kind == "probit":
        n_bins = int(params.pop("bins", 16))
        prior = (float(params.pop("prior_mu", 0.0)), float(params.pop("prior_sigma2", 1.0)))
        beta = float(params.pop("beta", 1.0))
        if params:
            raise ConfigurationError(f"unknown probit options: {sorted(params)}")
        spec = build_binning_spec(impressions, n_bins=n_bins)
        model = probit_train(impressions, spec=spec, prior=prior, beta=beta)
    elif kind == "gbt":
        model = gbt_train(impressions, GbtParams(**params))
    else:
        raise ConfigurationError(f"unknown click model kind {kind!r}")
    save_click_model(model, cfg.path(cfg.model_path))
    ctx["click_model"] = model
    summary.artifacts["click_model"] = str(cfg.path(cfg.model_path))


def _resolve_grid(cfg: JobConfig) -> list[GridPoint]:
    assert cfg.grid is not None
    if "inline" in cfg.grid:
        return _grid_from_settings(cfg.grid["inline"])
    if "file" in cfg.grid:
        return load_grid_file(cfg.grid["file"])
    return load_grid_file(cfg.path(cfg.grid["from_explorer"]))


def _stage_simulate(cfg: JobConfig, ctx: dict, summary: JobSummary) -> None:
    records = _load_records(cfg, ctx, summary)
    if "click_model" not in ctx:
        ctx["click_model"] = load_click_model(cfg.path(cfg.model_path))
    grid = _resolve_grid(cfg)
    accuracy = replay_check(records)
    summary.simulation_accuracy = accuracy.accuracy
    cube, errors = simulate_records(records, grid, ctx["click_model"], cfg.cube_dims, cfg.workers)
    if errors:
        summary.error = f"{errors} per-grid-point results errored"
    cube.save(cfg.path(cfg.cube_path))
    write_grid_file(grid, cfg.path(cfg.grid_path))
    ctx["cube"] = cube
    ctx["grid"] = grid
    summary.artifacts["cube"] = str(cfg.path(cfg.cube_path))
    summary.artifacts["grid"] = str(cfg.path(cfg.grid_path))
    summary.record_count = len(records)
    summary.grid_count = len(grid)


def _stage_report(cfg: JobConfig, ctx: dict, summary: JobSummary) -> None:
    if "cube" not in ctx:
        ctx["cube"] = DataCube.load(cfg.path(cfg.cube_path))
    if "grid" not in ctx:
        grid_path = cfg.path(cfg.grid_path)
        ctx["grid"] = load_grid_file(grid_path) if grid_path.exists() else []
    settings = {gp.id: gp.setting for gp in ctx["grid"]}
    settings.setdefault(0, {})
    rows = kpi_report(ctx["cube"], cfg.baseline_grid_id, settings=settings)
    write_report(rows, ctx["cube"].dimensions, cfg.path(cfg.report_path))
    summary.artifacts["report"] = str(cfg.path(cfg.report_path))


def _stage_explore(cfg: JobConfig, ctx: dict, summary: JobSummary) -> None:
    assert cfg.explore is not None
    rows = read_report(cfg.path(cfg.report_path))
    opts = dict(cfg.explore)
    objective_spec = opts.pop("objective")
    constraints = tuple(
        Constraint(
            metric=c["metric"],
            lower=-abs(c["max_abs"]) if "max_abs" in c else float(c["lower"]),
            upper=abs(c["max_abs"]) if "max_abs" in c else float(c["upper"]),
        )
        for c in objective_spec.get("constraints", ())
    )
    objective = Objective(
        metric=objective_spec["metric"],
        direction=objective_spec.get("direction", "maximize"),
        constraints=constraints,
    )
    metrics = {objective.metric} | {c.metric for c in constraints}
    dims, X, dY = surrogate_dataset_from_report(
        rows,
        metrics=sorted(metrics),
        baseline_grid_id=cfg.baseline_grid_id,
        baseline_setting=dict(cfg.logging_policy) or None,
    )
    ranges = {k: (float(lo), float(hi)) for k, (lo, hi) in opts.pop("ranges").items()}
    params = ExploreParams(
        batches=int(opts.pop("batches", 20)),
        population=int(opts.pop("population", 5000)),
        top_k=int(opts.pop("top_k", 5)),
        objective=objective,
        dimensions=dims,
        ranges=ranges,
        seed=derive_seed(cfg.seed, "explore"),
        model_kind=opts.pop("kind", "linear"),
        degree=int(opts.pop("degree", 3)),
        lam=float(opts.pop("lambda", 0.0)),
    )
    if opts:
        raise ConfigurationError(f"unknown explore options: {sorted(opts)}")
    result = optimize(X, dY, params)
    if result.infeasible:
        raise GenieError("exploration found no candidate satisfying the constraints")
    write_grid_file(_grid_from_settings(result.settings), cfg.path(cfg.recommended_path))
    summary.artifacts["recommended_grid"] = str(cfg.path(cfg.recommended_path))
    summary.grid_count = len(result.settings)


def _stage_compare(cfg: JobConfig, ctx: dict, summary: JobSummary) -> None:
    assert cfg.compare is not None
    opts = dict(cfg.compare)
    marketplace_path = cfg.path(cfg.marketplace_path)
    if "marketplace" in ctx:
        model = ctx["marketplace"]
    elif marketplace_path.exists():
        model = MarketplaceModel.load(marketplace_path)
    elif cfg.marketplace is not None:
        model = generate_marketplace(GeneratorConfig(**cfg.marketplace), derive_seed(cfg.seed, "marketplace"))
    else:
        raise ConfigurationError("compare stage needs a marketplace model or section")
    if "seeds" not in opts:
        opts["seeds"] = tuple(derive_seed(cfg.seed, "compare", i) for i in range(3))
    opts["seeds"] = tuple(opts["seeds"])
    if "proposals" in opts:
        opts["proposals"] = tuple(opts["proposals"])
    scenario = ScenarioConfig(**opts)
    result = compare_estimators(model, scenario)
    result.save(cfg.path(cfg.comparison_path))
    summary.artifacts["comparison"] = str(cfg.path(cfg.comparison_path))


_STAGE_FUNCS = {
    "generate": _stage_generate,
    "ingest": _stage_ingest,
    "train-click": _stage_train_click,
    "simulate": _stage_simulate,
    "report": _stage_report,
    "explore": _stage_explore,
    "compare": _stage_compare,
}


def run_job(config: JobConfig | str | Path) -> JobSummary:
    """Execute the job's stages in order; see module docstring."""
    if not isinstance(config, JobConfig):
        config = JobConfig.from_file(config)
    config.validate()
    config.output_dir.mkdir(parents=True, exist_ok=True)
    summary = JobSummary(seed=config.seed)
    ctx: dict = {}
    for stage in config.stages:
        started = time.perf_counter()
        try:
            _STAGE_FUNCS[stage](config, ctx, summary)
        except Exception as exc:  # noqa: BLE001 - summary reports the failing stage
            summary.failed_stage = stage
            summary.error = str(exc)
            break
        finally:
            summary.stage_seconds[stage] = time.perf_counter() - started
    with open(config.output_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=1, sort_keys=True)
    return summary
