"""Micro-macro FENE dumbbell solver: Navier-Stokes coupled to a Fokker-Planck equation on the unit disk."""
from .params import (
    REFERENCE,
    ConditionReport,
    DerivedParams,
    ParameterError,
    PhysicalParams,
    check_coefficient_condition,
    derive_params,
)

__all__ = [
    "REFERENCE",
    "ConditionReport",
    "DerivedParams",
    "ParameterError",
    "PhysicalParams",
    "check_coefficient_condition",
    "derive_params",
]
__version__ = "0.1.0"
