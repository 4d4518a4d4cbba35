"""Offline counterfactual policy estimation for sponsored-search auctions.

Replay logged auction requests through an open-box GSP engine under mutated
policy settings, re-calibrate clicks with a trained user model, aggregate
KPIs into mergeable data cubes, and search the knob space with regression
surrogates. A synthetic ground-truth marketplace and an importance-sampling
baseline provide the measurement harness.
"""

from .auction import (
    BASELINE_GRID_ID,
    GridPoint,
    KpiRecord,
    Modifier,
    PageAllocation,
    Restorer,
    SimulationAccuracy,
    apply_setting,
    baseline_grid_point,
    generate_modifiers,
    replay_check,
    run_auction,
    simulate_request,
)
from .boosting import GbtModel, GbtParams, gbt_predict, gbt_train
from .click_model import (
    BinnedVector,
    BinningSpec,
    FeatureBinning,
    LabeledImpression,
    ProbitModel,
    bin_features,
    build_binning_spec,
    eval_cumulative_error,
    eval_logloss,
    impression_features,
    impressions_from_logs,
    load_click_model,
    probit_train,
    save_click_model,
)
from .comparison import ComparisonResult, ScenarioConfig, compare_estimators
from .cube import (
    DEFAULT_DIMS,
    CellCounters,
    DataCube,
    KpiDelta,
    KpiMetrics,
    cube_results,
    empty_cube,
    kpi_report,
    merge_cubes,
    merge_many,
    read_report,
    request_cube,
    rollup,
    write_report,
)
from .errors import (
    ConfigurationError,
    GenieError,
    InfeasibleError,
    SchemaError,
    SingularityError,
    UndefinedMetricError,
    WeightError,
)
from .explore import (
    Constraint,
    ExploreParams,
    Objective,
    OptimizeResult,
    RegressionModel,
    explore,
    fit_regression,
    optimize,
    poly_features,
    rmse_cv,
    surrogate_dataset_from_report,
)
from .importance import (
    ISEstimate,
    KnobGaussian,
    ProposalDistribution,
    RandomizationSpec,
    generate_randomized_logs,
    is_estimate,
    is_kpi_estimates,
    plain_kpi_means,
    point_proposal,
)
from .marketplace import (
    AdvertiserSpec,
    GeneratorConfig,
    MarketplaceModel,
    QueryClass,
    generate_logs,
    generate_marketplace,
    ground_truth_kpi,
    iter_true_kpis,
    true_delta_with_se,
)
from .records import (
    KNOB_REGISTRY,
    AdRecord,
    AuctionData,
    BlockSpec,
    ConversionStats,
    DriftSpec,
    LogDataset,
    PageTemplate,
    PolicyConfig,
    load_log_file,
    validate_and_convert,
    write_log_file,
)
from .seeds import derive_seed, draw_root_seed, substream

__version__ = "0.1.0"
