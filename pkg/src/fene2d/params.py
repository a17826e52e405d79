"""Material parameters of the FENE dumbbell model and the constants derived from them.

All quantities are dimensionless.  The configuration variable lives on the unit
disk after rescaling by the maximal extension ``R``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


class ParameterError(ValueError):
    """Raised when a material parameter is outside its admissible domain."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class PhysicalParams:
    """The five material inputs (gamma, Re, We, N, R)."""

    gamma: float
    reynolds: float
    weissenberg: float
    n_param: float
    r_param: float

    def __post_init__(self):
        validate_physical(self)


def validate_physical(p: PhysicalParams) -> None:
    for name in ("gamma", "reynolds", "weissenberg", "n_param", "r_param"):
        value = getattr(p, name)
        if not math.isfinite(value):
            raise ParameterError(name, f"must be finite, got {value!r}")
    if not 0.0 < p.gamma < 1.0:
        raise ParameterError("gamma", f"must lie in (0, 1), got {p.gamma}")
    for name in ("reynolds", "weissenberg", "n_param", "r_param"):
        if getattr(p, name) <= 0.0:
            raise ParameterError(name, f"must be > 0, got {getattr(p, name)}")
    if p.n_param * p.r_param**2 <= 2.0:
        raise ParameterError(
            "n_param",
            f"need N*R^2 > 2 (delta > 1), got N*R^2 = {p.n_param * p.r_param**2}",
        )


@dataclass(frozen=True)
class DerivedParams:
    alpha1: float
    alpha2: float
    alpha3: float
    alpha4: float
    delta: float
    a_eq: float
    r_param: float

    @property
    def eq_mass(self) -> float:
        """Per-cell probability mass ``1/R^2`` of the rescaled density."""
        return 1.0 / self.r_param**2


def derive_params(p: PhysicalParams) -> DerivedParams:
    """Closed-form coefficients of the rescaled system.

    ``alpha4`` is the constant in the L2 energy bound
    ``|u(t)|^2 + alpha1 int |grad u|^2 <= |u0|^2 + alpha4 |psi0|^2_{L2_M}``.

    >>> d = derive_params(PhysicalParams(0.5, 1.0, 1.0, 2.0, 2.0))
    >>> d.delta, d.alpha1, d.alpha2, d.alpha3
    (4.0, 0.5, 4.0, 0.0625)
    """
    validate_physical(p)
    delta = p.n_param * p.r_param**2 / 2.0
    alpha1 = p.gamma / p.reynolds
    alpha2 = (
        p.gamma * (1.0 - p.gamma) / (p.reynolds * p.weissenberg**2)
        * (2.0 * delta / p.n_param) ** 2
    )
    alpha3 = 1.0 / (4.0 * delta * p.weissenberg)
    alpha4 = math.pi * alpha2**2 / (8.0 * delta**4 * alpha1 * alpha3)
    a_eq = (delta + 1.0) / (math.pi * p.r_param**2)
    return DerivedParams(alpha1, alpha2, alpha3, alpha4, delta, a_eq, p.r_param)


@dataclass(frozen=True)
class ConditionReport:
    margin: float
    satisfied: bool


def check_coefficient_condition(d: DerivedParams, c_product: float = 1.0) -> ConditionReport:
    """Signed margin of ``alpha1 alpha3 delta^2 R^2 >= 2 C1 C2 alpha2``.

    ``c_product`` stands for the unknown product ``C1*C2``; it is a knob, not a
    computed quantity.
    """
    if not (c_product > 0.0 and math.isfinite(c_product)):
        raise ParameterError("c_product", f"must be finite and > 0, got {c_product}")
    if not (d.alpha2 > 0.0 and d.alpha1 > 0.0 and d.alpha3 > 0.0):
        raise ParameterError("alpha2", "derived coefficients must be strictly positive")
    lhs = d.alpha1 * d.alpha3 * d.delta**2 * d.r_param**2
    margin = lhs - 2.0 * c_product * d.alpha2
    return ConditionReport(margin=margin, satisfied=margin >= 0.0)


REFERENCE = PhysicalParams(gamma=0.5, reynolds=1.0, weissenberg=1.0, n_param=2.0, r_param=2.0)
