"""Regression-guided search over the policy knob space.

Fits per-metric polynomial surrogates (plain least squares or ridge, normal
equations) to simulated (grid point -> KPI delta) pairs, then runs an
iterative explore / predict / select loop that keeps the best-P population
across iterations and finally returns the top-k settings by the objective.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, InfeasibleError, SingularityError
from .records import KNOB_REGISTRY
from .seeds import substream

_DEGREES = (1, 2, 3)


def _monomials(n_dims: int, degree: int) -> list[tuple[int, ...]]:
    combos: list[tuple[int, ...]] = [()]
    for r in range(1, degree + 1):
        combos.extend(itertools.combinations_with_replacement(range(n_dims), r))
    return combos


def poly_features(x: Sequence[float], degree: int) -> np.ndarray:
    """All monomials of total degree <= degree, constant first, canonical order."""
    if degree not in _DEGREES:
        raise ConfigurationError(f"degree must be one of {_DEGREES}, got {degree}")
    x = np.asarray(x, dtype=float)
    return np.array([np.prod(x[list(combo)]) for combo in _monomials(len(x), degree)])


def poly_feature_names(dim_names: Sequence[str], degree: int) -> list[str]:
    names = []
    for combo in _monomials(len(dim_names), degree):
        if not combo:
            names.append("1")
            continue
        parts = []
        for dim, power in sorted(
            {d: combo.count(d) for d in dict.fromkeys(combo)}.items()
        ):
            parts.append(dim_names[dim] if power == 1 else f"{dim_names[dim]}^{power}")
        names.append("*".join(parts))
    return names


def poly_design(X: np.ndarray, degree: int) -> np.ndarray:
    if degree not in _DEGREES:
        raise ConfigurationError(f"degree must be one of {_DEGREES}, got {degree}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = [np.ones(len(X))]
    for combo in _monomials(X.shape[1], degree)[1:]:
        cols.append(np.prod(X[:, list(combo)], axis=1))
    return np.column_stack(cols)


@dataclass
class RegressionModel:
    kind: str  # "linear" | "ridge"
    degree: int
    lam: float
    coefficients: np.ndarray  # over the polynomial expansion, original units
    target_metric: str = ""
    dim_names: tuple[str, ...] = ()

    def predict(self, X: np.ndarray) -> np.ndarray:
        return poly_design(X, self.degree) @ self.coefficients


def _collinear_columns(design: np.ndarray, names: list[str]) -> list[str]:
    _, r, pivots = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(design.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    return [names[p] for p in sorted(pivots[rank:])]


def fit_regression(
    X: np.ndarray,
    dY: np.ndarray,
    kind: str = "linear",
    lam: float = 0.0,
    degree: int = 1,
    target_metric: str = "",
    dim_names: Sequence[str] | None = None,
) -> RegressionModel:
    """Normal-equations fit of the polynomial surrogate.

    Ridge standardizes the non-constant features, shrinks with lam excluding
    the intercept, and reports coefficients back in original units; lam=0
    reproduces the plain least-squares fit. A rank-deficient linear system
    raises naming the collinear columns.
    """
    if kind not in ("linear", "ridge"):
        raise ConfigurationError(f"kind must be linear or ridge, got {kind!r}")
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    dY = np.asarray(dY, dtype=float)
    if len(X) != len(dY):
        raise ConfigurationError(f"|X| = {len(X)} but |dY| = {len(dY)}")
    design = poly_design(X, degree)
    names = poly_feature_names(
        tuple(dim_names) if dim_names else tuple(f"x{i}" for i in range(X.shape[1])), degree
    )
    n, m = design.shape
    if kind == "linear" and n < m:
        raise ConfigurationError(
            f"linear fit needs at least {m} points for {m} features, got {n} (use ridge)"
        )

    if kind == "linear":
        gram = design.T @ design
        try:
            coef = scipy.linalg.solve(gram, design.T @ dY, assume_a="pos")
        except scipy.linalg.LinAlgError:
            cols = _collinear_columns(design, names)
            raise SingularityError(
                f"singular normal equations; collinear columns: {cols} (ridge recommended)",
                columns=cols,
            ) from None
        return RegressionModel(kind, degree, 0.0, coef, target_metric, tuple(dim_names or ()))

    # ridge: standardize non-constant columns, exclude the intercept from shrinkage
    feats = design[:, 1:]
    means = feats.mean(axis=0)
    stds = feats.std(axis=0)
    live = stds > 0
    z = np.zeros_like(feats)
    z[:, live] = (feats[:, live] - means[live]) / stds[live]
    zc = z[:, live]
    y_mean = dY.mean()
    gram = zc.T @ zc + lam * np.eye(zc.shape[1])
    try:
        beta_z = scipy.linalg.solve(gram, zc.T @ (dY - y_mean), assume_a="pos")
    except scipy.linalg.LinAlgError:
        cols = _collinear_columns(zc, [nm for nm, ok in zip(names[1:], live) if ok])
        raise SingularityError(
            f"singular ridge system at lambda={lam}; collinear columns: {cols}", columns=cols
        ) from None
    coef = np.zeros(m)
    coef[1:][live] = beta_z / stds[live]
    coef[0] = y_mean - float((coef[1:][live] * means[live]).sum())
    return RegressionModel(kind, degree, lam, coef, target_metric, tuple(dim_names or ()))


def rmse_cv(
    X: np.ndarray,
    dY: np.ndarray | dict[str, np.ndarray],
    folds: int = 3,
    kind: str = "linear",
    lam: float = 0.0,
    degree: int = 1,
    seed: int = 0,
):
    """Mean held-out RMSE over seeded random folds; dict input gives per-metric RMSE."""
    if isinstance(dY, dict):
        return {
            metric: rmse_cv(X, values, folds=folds, kind=kind, lam=lam, degree=degree, seed=seed)
            for metric, values in dY.items()
        }
    X = np.atleast_2d(np.asarray(X, dtype=float))
    dY = np.asarray(dY, dtype=float)
    if len(X) < folds:
        raise ConfigurationError(f"need at least {folds} points for {folds}-fold CV")
    perm = substream(seed, "cv-folds").permutation(len(X))
    errors = []
    for chunk in np.array_split(perm, folds):
        mask = np.ones(len(X), dtype=bool)
        mask[chunk] = False
        model = fit_regression(X[mask], dY[mask], kind=kind, lam=lam, degree=degree)
        resid = model.predict(X[chunk]) - dY[chunk]
        errors.append(float(np.sqrt(np.mean(resid**2))))
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# iterative optimizer

@dataclass(frozen=True)
class Constraint:
    """Bound on another metric's predicted delta: lower <= value <= upper."""

    metric: str
    lower: float
    upper: float

    def satisfied(self, value: float) -> bool:
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class Objective:
    metric: str
    direction: str = "maximize"
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        if self.direction not in ("maximize", "minimize"):
            raise ConfigurationError(f"direction must be maximize or minimize, got {self.direction!r}")

    def score(self, value: float) -> float:
        return value if self.direction == "maximize" else -value


@dataclass
class ExploreParams:
    batches: int
    population: int
    top_k: int
    objective: Objective
    dimensions: tuple[str, ...]
    ranges: dict[str, tuple[float, float]]
    seed: int = 0
    model_kind: str = "linear"
    degree: int = 3
    lam: float = 0.0

    def __post_init__(self):
        if self.batches < 0:
            raise ConfigurationError("batches must be >= 0")
        if self.population < 1:
            raise ConfigurationError("population must be >= 1")
        if not 1 <= self.top_k <= self.population:
            raise ConfigurationError("top_k must be in [1, population]")
        for dim in self.dimensions:
            if dim not in self.ranges:
                raise ConfigurationError(f"no range declared for dimension {dim!r}")
            lo, hi = self.ranges[dim]
            if not lo < hi:
                raise ConfigurationError(f"range for {dim!r} must satisfy min < max")


def explore(
    current: np.ndarray,
    population: int,
    ranges: Sequence[tuple[float, float]],
    rng: np.random.Generator | int,
) -> np.ndarray:
    """Mutate uniformly chosen parents on a random nonempty dimension subset.

    Resampled values are uniform within each dimension's [min, max] range;
    every candidate stays inside the ranges.
    """
    current = np.atleast_2d(np.asarray(current, dtype=float))
    if current.size == 0:
        raise ConfigurationError("current solution set must be non-empty")
    if isinstance(rng, (int, np.integer)):
        rng = substream(int(rng), "explore")
    k = current.shape[1]
    lows = np.array([lo for lo, _ in ranges])
    highs = np.array([hi for _, hi in ranges])
    out = np.empty((population, k))
    for i in range(population):
        parent = current[rng.integers(len(current))]
        size = int(rng.integers(1, k + 1))
        dims = rng.choice(k, size=size, replace=False)
        candidate = parent.copy()
        candidate[dims] = rng.uniform(lows[dims], highs[dims])
        out[i] = candidate
    return out


@dataclass
class OptimizeResult:
    settings: list[dict[str, float]]
    predicted: list[dict[str, float]]
    infeasible: bool = False
    best_trace: list[float] = field(default_factory=list)


def optimize(
    X: np.ndarray,
    dY: dict[str, np.ndarray],
    params: ExploreParams,
) -> OptimizeResult:
    """Iterative explore / predict / select over the knob space.

    Initial points keep their measured deltas; explored candidates carry
    surrogate predictions. Each iteration keeps the best P of the union, so
    the best feasible objective value never decreases. Candidates violating
    any constraint are excluded before the final top-k ranking; if nothing
    feasible remains the result is flagged infeasible.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) < 1:
        raise ConfigurationError("need at least one evaluated grid point")
    if params.objective.metric not in dY:
        raise ConfigurationError(f"no deltas provided for objective metric {params.objective.metric!r}")
    for c in params.objective.constraints:
        if c.metric not in dY:
            raise ConfigurationError(f"no deltas provided for constraint metric {c.metric!r}")
    metrics = sorted(dY)
    models = {
        m: fit_regression(
            X,
            dY[m],
            kind=params.model_kind,
            lam=params.lam,
            degree=params.degree,
            target_metric=m,
            dim_names=params.dimensions,
        )
        for m in metrics
    }

    ranges = [params.ranges[d] for d in params.dimensions]
    pool_x = X.copy()
    pool_y = {m: np.asarray(dY[m], dtype=float).copy() for m in metrics}
    pool_idx = np.arange(len(X))
    next_idx = len(X)
    objective = params.objective

    def feasible_mask(values: dict[str, np.ndarray]) -> np.ndarray:
        mask = np.ones(len(values[objective.metric]), dtype=bool)
        for c in objective.constraints:
            v = values[c.metric]
            mask &= (v >= c.lower) & (v <= c.upper)
        return mask

    def select(xs, ys, idxs, keep: int):
        score = np.array([objective.score(v) for v in ys[objective.metric]])
        feasible = feasible_mask(ys)
        # feasible candidates rank above violators; stable ties by creation index
        order = np.lexsort((idxs, -score, ~feasible))
        chosen = order[:keep]
        return xs[chosen], {m: ys[m][chosen] for m in metrics}, idxs[chosen]

    best_trace: list[float] = []

    def record_best():
        feasible = feasible_mask(pool_y)
        if feasible.any():
            vals = [objective.score(v) for v in pool_y[objective.metric][feasible]]
            best_trace.append(max(vals))

    pool_x, pool_y, pool_idx = select(pool_x, pool_y, pool_idx, min(params.population, len(pool_x)))
    record_best()

    for batch in range(params.batches):
        rng = substream(params.seed, "explore-batch", batch)
        cand_x = explore(pool_x, params.population, ranges, rng)
        cand_y = {m: models[m].predict(cand_x) for m in metrics}
        cand_idx = np.arange(next_idx, next_idx + len(cand_x))
        next_idx += len(cand_x)
        union_x = np.vstack([pool_x, cand_x])
        union_y = {m: np.concatenate([pool_y[m], cand_y[m]]) for m in metrics}
        union_idx = np.concatenate([pool_idx, cand_idx])
        pool_x, pool_y, pool_idx = select(union_x, union_y, union_idx, params.population)
        record_best()

    feasible = feasible_mask(pool_y)
    if not feasible.any():
        return OptimizeResult(settings=[], predicted=[], infeasible=True, best_trace=best_trace)
    fx = pool_x[feasible]
    fy = {m: pool_y[m][feasible] for m in metrics}
    fidx = pool_idx[feasible]
    score = np.array([objective.score(v) for v in fy[objective.metric]])
    order = np.lexsort((fidx, -score))[: params.top_k]
    settings = [
        {dim: float(fx[i][j]) for j, dim in enumerate(params.dimensions)} for i in order
    ]
    predicted = [{m: float(fy[m][i]) for m in metrics} for i in order]
    return OptimizeResult(settings=settings, predicted=predicted, best_trace=best_trace)


# ---------------------------------------------------------------------------
# report-table input

def surrogate_dataset_from_report(
    rows: list[dict],
    metrics: Sequence[str] = ("rpm", "cy", "mliy"),
    baseline_grid_id: int = 0,
    baseline_setting: dict[str, float] | None = None,
) -> tuple[tuple[str, ...], np.ndarray, dict[str, np.ndarray]]:
    """Turn kpi_report rows into a surrogate training set.

    Rows are re-aggregated per grid point from their counters columns, so
    reports cut by extra dimensions work too. Dimensions are the union of
    knob names across settings; a knob absent from a setting falls back to
    the baseline setting (registry default when not given).
    """
    by_grid: dict[int, dict] = {}
    settings: dict[int, dict[str, float]] = {}
    for row in rows:
        gid = row["grid_point_id"]
        agg = by_grid.setdefault(
            gid, {"requests": 0, "impressions": 0, "mainline_impressions": 0, "expected_clicks": 0.0, "revenue": 0.0}
        )
        for key in agg:
            agg[key] += row[key]
        if row.get("setting") is not None:
            settings[gid] = {k: float(v) for k, v in row["setting"].items()}
    if baseline_grid_id not in by_grid:
        raise ConfigurationError(f"baseline grid point {baseline_grid_id} not in report")

    def metrics_of(agg) -> dict[str, float | None]:
        req = agg["requests"]
        if req == 0:
            return {m: None for m in ("rpm", "cy", "iy", "mliy", "cpc")}
        clicks = agg["expected_clicks"]
        return {
            "rpm": 1000.0 * agg["revenue"] / req,
            "cy": clicks / req,
            "iy": agg["impressions"] / req,
            "mliy": agg["mainline_impressions"] / req,
            "cpc": agg["revenue"] / clicks if clicks > 0 else None,
        }

    base = metrics_of(by_grid[baseline_grid_id])
    defaults = dict(baseline_setting) if baseline_setting else {}
    dims = tuple(sorted({k for s in settings.values() for k in s}))
    if not dims:
        raise ConfigurationError("report carries no knob settings to explore over")
    xs, ys = [], {m: [] for m in metrics}
    for gid in sorted(by_grid):
        if gid not in settings and gid != baseline_grid_id:
            continue
        setting = settings.get(gid, {})
        row_metrics = metrics_of(by_grid[gid])
        deltas = {}
        ok = True
        for m in metrics:
            t, b = row_metrics.get(m), base.get(m)
            if t is None or b is None or b == 0:
                ok = False
                break
            deltas[m] = (t - b) / b
        if not ok:
            continue
        xs.append([setting.get(d, defaults.get(d, KNOB_REGISTRY.get(d, 0.0))) for d in dims])
        for m in metrics:
            ys[m].append(deltas[m])
    return dims, np.asarray(xs, dtype=float), {m: np.asarray(v, dtype=float) for m, v in ys.items()}
