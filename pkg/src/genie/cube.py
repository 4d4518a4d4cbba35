"""Additive KPI data cubes.

Per-request outcomes become single-cell cubes keyed by job-configured
dimensions; cubes merge by cell-wise sum. Fractional quantities (expected
clicks, revenue) are stored as 64-bit micro-unit integers so that merging
is exactly associative and commutative regardless of aggregation order.
Derived ratios are computed only from fully aggregated counters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .auction import KpiRecord
from .errors import ConfigurationError, SchemaError

MICRO = 10**6

METRIC_NAMES = ("rpm", "cy", "iy", "mliy", "cpc")


def to_micro(value: float) -> int:
    return int(round(value * MICRO))


@dataclass
class CellCounters:
    requests: int = 0
    impressions: int = 0
    mainline_impressions: int = 0
    expected_clicks_micro: int = 0
    revenue_micro: int = 0

    @property
    def expected_clicks(self) -> float:
        return self.expected_clicks_micro / MICRO

    @property
    def revenue(self) -> float:
        return self.revenue_micro / MICRO

    def add(self, other: "CellCounters") -> None:
        self.requests += other.requests
        self.impressions += other.impressions
        self.mainline_impressions += other.mainline_impressions
        self.expected_clicks_micro += other.expected_clicks_micro
        self.revenue_micro += other.revenue_micro

    def copy(self) -> "CellCounters":
        return CellCounters(
            self.requests,
            self.impressions,
            self.mainline_impressions,
            self.expected_clicks_micro,
            self.revenue_micro,
        )


_DIMENSION_FIELDS = {
    "grid_point_id": lambda kpi: kpi.grid_id,
    "query_class": lambda kpi: kpi.query_class,
}

DEFAULT_DIMS = ("grid_point_id", "query_class")


@dataclass
class DataCube:
    dimensions: tuple[str, ...]
    cells: dict[tuple, CellCounters] = field(default_factory=dict)

    def total(self) -> CellCounters:
        out = CellCounters()
        for counters in self.cells.values():
            out.add(counters)
        return out

    def to_dict(self) -> dict:
        return {
            "dimensions": list(self.dimensions),
            "cells": [
                {
                    "key": list(key),
                    "requests": c.requests,
                    "impressions": c.impressions,
                    "mainline_impressions": c.mainline_impressions,
                    "expected_clicks_micro": c.expected_clicks_micro,
                    "revenue_micro": c.revenue_micro,
                }
                for key, c in sorted(self.cells.items())
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DataCube":
        cells = {}
        for cell in data["cells"]:
            cells[tuple(cell["key"])] = CellCounters(
                requests=int(cell["requests"]),
                impressions=int(cell["impressions"]),
                mainline_impressions=int(cell["mainline_impressions"]),
                expected_clicks_micro=int(cell["expected_clicks_micro"]),
                revenue_micro=int(cell["revenue_micro"]),
            )
        return cls(dimensions=tuple(data["dimensions"]), cells=cells)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "DataCube":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def empty_cube(dims: Sequence[str] = DEFAULT_DIMS) -> DataCube:
    return DataCube(dimensions=tuple(dims))


def request_cube(kpi: KpiRecord, dims: Sequence[str] = DEFAULT_DIMS) -> DataCube:
    """Single-request cube for one (grid point, request) outcome."""
    if kpi.error is not None:
        raise SchemaError(f"request {kpi.request_id}: cannot cube an errored result ({kpi.error})")
    key = []
    for dim in dims:
        try:
            key.append(_DIMENSION_FIELDS[dim](kpi))
        except KeyError:
            raise ConfigurationError(
                f"unknown cube dimension {dim!r}; available: {sorted(_DIMENSION_FIELDS)}"
            ) from None
    counters = CellCounters(
        requests=1,
        impressions=kpi.impressions,
        mainline_impressions=kpi.mainline_impressions,
        expected_clicks_micro=to_micro(kpi.expected_clicks),
        revenue_micro=to_micro(kpi.revenue),
    )
    return DataCube(dimensions=tuple(dims), cells={tuple(key): counters})


def merge_cubes(a: DataCube, b: DataCube) -> DataCube:
    """Cell-wise sum over the union of keys. Dimensions must match exactly."""
    if a.dimensions != b.dimensions:
        raise SchemaError(f"cube dimensions differ: {a.dimensions} vs {b.dimensions}")
    merged = {key: counters.copy() for key, counters in a.cells.items()}
    for key, counters in b.cells.items():
        if key in merged:
            merged[key].add(counters)
        else:
            merged[key] = counters.copy()
    return DataCube(dimensions=a.dimensions, cells=merged)


def merge_many(cubes: Iterable[DataCube], dims: Sequence[str] = DEFAULT_DIMS) -> DataCube:
    out = empty_cube(dims)
    for cube in cubes:
        out = merge_cubes(out, cube)
    return out


def cube_results(results: Iterable[KpiRecord], dims: Sequence[str] = DEFAULT_DIMS) -> tuple[DataCube, int]:
    """Fold per-request results into one cube, skipping (and counting) errored ones."""
    cube = empty_cube(dims)
    errors = 0
    for kpi in results:
        if kpi.error is not None:
            errors += 1
            continue
        cube = merge_cubes(cube, request_cube(kpi, dims))
    return cube, errors


def rollup(cube: DataCube, dims: Sequence[str]) -> DataCube:
    """Project the cube onto a dimension subset, summing collapsed cells."""
    missing = [d for d in dims if d not in cube.dimensions]
    if missing:
        raise SchemaError(f"cannot roll up to unknown dimensions {missing}")
    idx = [cube.dimensions.index(d) for d in dims]
    out = empty_cube(dims)
    for key, counters in cube.cells.items():
        new_key = tuple(key[i] for i in idx)
        if new_key in out.cells:
            out.cells[new_key].add(counters)
        else:
            out.cells[new_key] = counters.copy()
    return out


# ---------------------------------------------------------------------------
# derived metrics and reports

@dataclass(frozen=True)
class KpiMetrics:
    """Derived ratios; None marks a metric undefined for the cell."""

    rpm: float | None
    cy: float | None
    iy: float | None
    mliy: float | None
    cpc: float | None

    def get(self, name: str) -> float | None:
        return getattr(self, name)


def cell_metrics(counters: CellCounters) -> KpiMetrics:
    if counters.requests == 0:
        return KpiMetrics(None, None, None, None, None)
    requests = counters.requests
    revenue = counters.revenue
    clicks = counters.expected_clicks
    return KpiMetrics(
        rpm=1000.0 * revenue / requests,
        cy=clicks / requests,
        iy=counters.impressions / requests,
        mliy=counters.mainline_impressions / requests,
        cpc=(revenue / clicks) if clicks > 0 else None,
    )


@dataclass(frozen=True)
class KpiDelta:
    """Normalized (treatment - baseline) / baseline per metric; None when undefined."""

    rpm: float | None
    cy: float | None
    iy: float | None
    mliy: float | None
    cpc: float | None

    def get(self, name: str) -> float | None:
        return getattr(self, name)


def metric_deltas(treatment: KpiMetrics, baseline: KpiMetrics) -> KpiDelta:
    values = {}
    for name in METRIC_NAMES:
        t, b = treatment.get(name), baseline.get(name)
        values[name] = None if t is None or b is None or b == 0 else (t - b) / b
    return KpiDelta(**values)


@dataclass
class ReportRow:
    grid_point_id: int
    key: dict[str, object]
    counters: CellCounters
    metrics: KpiMetrics
    deltas: KpiDelta | None
    setting: dict[str, float] | None = None


def kpi_report(
    cube: DataCube,
    baseline_grid_id: int = 0,
    settings: dict[int, dict[str, float]] | None = None,
) -> list[ReportRow]:
    """Per-cell derived metrics plus normalized deltas against the baseline grid point.

    Ratios are computed from the aggregated counters of each cell, never
    averaged per request. Deltas compare cells that agree on every non-grid
    dimension; a cell with no matching baseline cell reports no deltas.
    """
    if "grid_point_id" not in cube.dimensions:
        raise ConfigurationError("kpi_report requires a grid_point_id dimension")
    grid_idx = cube.dimensions.index("grid_point_id")
    if not any(key[grid_idx] == baseline_grid_id for key in cube.cells):
        raise ConfigurationError(f"baseline grid point {baseline_grid_id} not present in cube")

    baselines = {
        tuple(v for i, v in enumerate(key) if i != grid_idx): counters
        for key, counters in cube.cells.items()
        if key[grid_idx] == baseline_grid_id
    }
    rows = []
    for key in sorted(cube.cells):
        counters = cube.cells[key]
        rest = tuple(v for i, v in enumerate(key) if i != grid_idx)
        grid_id = key[grid_idx]
        metrics = cell_metrics(counters)
        base = baselines.get(rest)
        deltas = metric_deltas(metrics, cell_metrics(base)) if base is not None else None
        rows.append(
            ReportRow(
                grid_point_id=grid_id,
                key={d: key[i] for i, d in enumerate(cube.dimensions)},
                counters=counters,
                metrics=metrics,
                deltas=deltas,
                setting=None if settings is None else settings.get(grid_id),
            )
        )
    return rows


_REPORT_FLOAT_COLS = ("expected_clicks", "revenue")
_NA = "NA"


def _fmt(value) -> str:
    if value is None:
        return _NA
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_header(dims: Sequence[str]) -> list[str]:
    return (
        list(dims)
        + ["requests", "impressions", "mainline_impressions", "expected_clicks", "revenue"]
        + [m for m in METRIC_NAMES]
        + [f"d_{m}" for m in METRIC_NAMES]
        + ["setting"]
    )


def write_report(rows: list[ReportRow], dims: Sequence[str], path) -> None:
    """Tab-separated report, one row per (grid point, cell), stable column order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(report_header(dims)) + "\n")
        for row in rows:
            cells = [_fmt(row.key[d]) for d in dims]
            c = row.counters
            cells += [
                str(c.requests),
                str(c.impressions),
                str(c.mainline_impressions),
                _fmt(c.expected_clicks),
                _fmt(c.revenue),
            ]
            cells += [_fmt(row.metrics.get(m)) for m in METRIC_NAMES]
            if row.deltas is None:
                cells += [_NA] * len(METRIC_NAMES)
            else:
                cells += [_fmt(row.deltas.get(m)) for m in METRIC_NAMES]
            cells.append(
                json.dumps(row.setting, sort_keys=True, separators=(",", ":"))
                if row.setting is not None
                else _NA
            )
            fh.write("\t".join(cells) + "\n")


def read_report(path) -> list[dict]:
    """Parse a report file back into dicts keyed by column name (floats where possible)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            raw = line.rstrip("\n").split("\t")
            row: dict = {}
            for name, value in zip(header, raw):
                if value == _NA:
                    row[name] = None
                elif name == "setting":
                    row[name] = json.loads(value)
                else:
                    try:
                        row[name] = int(value)
                    except ValueError:
                        try:
                            row[name] = float(value)
                        except ValueError:
                            row[name] = value
            rows.append(row)
    return rows
