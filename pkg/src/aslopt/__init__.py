"""Augmented switching laws for time-optimal control of single-input linear systems."""

from .config import DEFAULT, RunConfig
from .linsys import (
    Constraint,
    ConstraintOrderInfo,
    LinearSystem,
    constraint_order,
    matrix_exponential,
    phi_vector,
    propagate,
)
from .arcs import SystemBehavior, arc_control, make_constrained, make_unconstrained
from .asl import (
    AdditionalEndConstraint,
    AugmentedSwitchingLaw,
    FeasibilityReport,
    TangentMarker,
    TimedTrajectory,
    build_equality_system,
    check_feasible,
    connection_conditions,
    end_feasibility,
    extract_asl,
    tangent_condition,
)
from .optimality import (
    EqualityRow,
    EqualitySystem,
    OptimalityVerdict,
    equality_jacobian,
    keypoint_jacobian,
    necessary_condition_test,
)

__all__ = [
    "DEFAULT",
    "RunConfig",
    "Constraint",
    "ConstraintOrderInfo",
    "LinearSystem",
    "constraint_order",
    "matrix_exponential",
    "phi_vector",
    "propagate",
    "SystemBehavior",
    "arc_control",
    "make_constrained",
    "make_unconstrained",
    "AdditionalEndConstraint",
    "AugmentedSwitchingLaw",
    "FeasibilityReport",
    "TangentMarker",
    "TimedTrajectory",
    "build_equality_system",
    "check_feasible",
    "connection_conditions",
    "end_feasibility",
    "extract_asl",
    "tangent_condition",
    "EqualityRow",
    "EqualitySystem",
    "OptimalityVerdict",
    "equality_jacobian",
    "keypoint_jacobian",
    "necessary_condition_test",
]

__version__ = "0.1.0"
