"""Online Bayesian calibration of affine term-structure models.

The package combines a per-particle Kalman filter over the latent factors
with a particle representation of the static (or piecewise-constant)
parameter posterior.  Bond loadings come from a Taylor-series solver for the
associated ordinary differential equations, and a nested particle filter
plus an exhaustive grid posterior serve as cross-checks.
"""

from .estimators import (
    ChangePointKalmanParticleFilter,
    GridPosteriorOracle,
    KalmanParticleFilter,
    NestedParticleFilter,
    PosteriorTrace,
    total_variation,
)
from .io import (
    read_series_csv,
    read_trace_csv,
    read_truth_json,
    write_series_csv,
    write_summary_json,
    write_trace_csv,
    write_truth_json,
)
from .kalman import (
    DegenerateObservationError,
    FilterResult,
    GaussianState,
    UpdateResult,
    filter_pass,
    predict,
    update,
)
from .models import (
    AffineModelSpec,
    ModelFamily,
    ObservationMap,
    TransitionMoments,
    bond_price,
    build_observation_map,
    family_names,
    get_family,
    riccati_params,
    transition_moments,
    validate_admissibility,
    zero_rate,
)
from .particles import (
    ParticleCloud,
    WeightCollapseError,
    cloud_moments,
    normalize_log_weights,
    random_walk_jitter,
    resample_multinomial,
    resample_systematic,
    shrinkage_jitter,
)
from .riccati import (
    RiccatiBlowupError,
    RiccatiParams,
    RiccatiSolution,
    solve,
    taylor_coeffs,
)
from .simulate import (
    TRADING_DT,
    ObservationSeries,
    SimulationTruth,
    make_observations,
    simulate_factors,
    simulate_series,
)

__version__ = "0.1.0"

__all__ = [
    "AffineModelSpec",
    "ChangePointKalmanParticleFilter",
    "DegenerateObservationError",
    "FilterResult",
    "GaussianState",
    "GridPosteriorOracle",
    "KalmanParticleFilter",
    "ModelFamily",
    "NestedParticleFilter",
    "ObservationMap",
    "ObservationSeries",
    "ParticleCloud",
    "PosteriorTrace",
    "RiccatiBlowupError",
    "RiccatiParams",
    "RiccatiSolution",
    "SimulationTruth",
    "TRADING_DT",
    "TransitionMoments",
    "UpdateResult",
    "WeightCollapseError",
    "bond_price",
    "build_observation_map",
    "cloud_moments",
    "family_names",
    "filter_pass",
    "get_family",
    "make_observations",
    "normalize_log_weights",
    "predict",
    "random_walk_jitter",
    "read_series_csv",
    "read_trace_csv",
    "read_truth_json",
    "resample_multinomial",
    "resample_systematic",
    "riccati_params",
    "shrinkage_jitter",
    "simulate_factors",
    "simulate_series",
    "solve",
    "taylor_coeffs",
    "total_variation",
    "transition_moments",
    "update",
    "validate_admissibility",
    "write_series_csv",
    "write_summary_json",
    "write_trace_csv",
    "write_truth_json",
    "zero_rate",
]
