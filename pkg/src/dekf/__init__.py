"""Decoupled extended Kalman filtering for exponential-family factorization models."""

from .errors import (
    ConfigError,
    DEKFError,
    DimensionMismatch,
    DuplicateMode,
    IncompatibleLink,
    InvalidObservation,
    IoError,
    LineSearchFailed,
    MissingGroundTruth,
    NonPositiveDefinite,
    NumericalError,
    ObservationOverflow,
    OrderUnsupported,
    SnapshotFormatError,
    SingularInnovation,
    TimeTravel,
)
from .expfam import Family, Link
from .filter import (
    DecoupledEKF,
    DynamicsSpec,
    EntityPosterior,
    EntityStore,
    UpdateReport,
    alpha_from_half_life,
    fisher_info,
    full_ekf_update,
    iekf_update,
    predict,
    update,
)
from .signal import BIAS_ID, EntityId, FMSignal, GLMSignal, MFSignal, SignalEval, TFSignal

__version__ = "0.1.0"
