"""Quasilinear wave evolution and decay diagnostics on a disc+cone foliation."""

from conewave.geometry import (
    DecayParams,
    EnvelopeH,
    MetricSpec,
    NullFormTensor,
    PARAMS_DEFAULT,
    SpacetimePoint,
    check_null_condition,
    frame_component,
    make_metric,
    null_frame_at,
    validate_envelope,
    validate_params,
)

__all__ = [
    "DecayParams",
    "EnvelopeH",
    "MetricSpec",
    "NullFormTensor",
    "PARAMS_DEFAULT",
    "SpacetimePoint",
    "check_null_condition",
    "frame_component",
    "make_metric",
    "null_frame_at",
    "validate_envelope",
    "validate_params",
]

__version__ = "0.1.0"
