"""Domain vocabulary: intervals, per-cell summaries, weights and results."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .errors import (
    EmptyStrata,
    GroupMissing,
    InvariantViolation,
)

DEFAULT_LEVEL = 0.95
WEIGHT_SUM_TOL = 1e-12
# slack for floating-point round-off when checking containment
_CONTAIN_TOL = 1e-9


class Scheme(str, Enum):
    MH = "MH"
    INV = "INV"
    MR = "MR"
    FIXED = "FIXED"

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ValueError(f"unknown weight scheme {text!r}") from None


class Method(str, Enum):
    AV = "AV"
    AC = "AC"
    AC2 = "AC2"
    AVL = "AVL"
    ACL = "ACL"
    WALD = "WALD"
    ASY = "ASY"
    DC = "DC"
    YS = "YS"

    @classmethod
    def parse(cls, text: str) -> "Method":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ValueError(f"unknown method {text!r}") from None


class Scale(str, Enum):
    DIFFERENCE = "difference"
    RATIO = "ratio"


DIFFERENCE_METHODS = frozenset(
    {Method.AV, Method.AC, Method.AC2, Method.WALD, Method.DC, Method.YS}
)
RATIO_METHODS = frozenset(
    {Method.AV, Method.AVL, Method.AC, Method.ACL, Method.AC2, Method.ASY, Method.DC}
)
GAMMA_METHODS = frozenset({Method.AC, Method.ACL, Method.AC2, Method.YS})


def methods_for(scale: Scale) -> frozenset:
    return DIFFERENCE_METHODS if scale is Scale.DIFFERENCE else RATIO_METHODS


def _fmt_limit(value: float) -> float | str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _parse_limit(value) -> float:
    if isinstance(value, str):
        return float(value)  # float() understands "inf" / "-inf"
    return float(value)


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float = DEFAULT_LEVEL

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise InvariantViolation("level", f"must lie in (0, 1), got {self.level}")
        if math.isnan(self.lower) or math.isnan(self.upper):
            raise InvariantViolation("ci", "limits must not be NaN")
        if self.lower > self.upper:
            raise InvariantViolation(
                "ci", f"lower {self.lower} exceeds upper {self.upper}"
            )

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {
            "lower": _fmt_limit(self.lower),
            "upper": _fmt_limit(self.upper),
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfidenceInterval":
        return cls(_parse_limit(d["lower"]), _parse_limit(d["upper"]), float(d["level"]))


@dataclass(frozen=True)
class StratumGroupSummary:
    """Point estimate, variance, one-sample CI and size for one stratum x group cell."""

    estimate: float
    variance: float
    ci: ConfidenceInterval
    n: int

    def __post_init__(self):
        if not self.variance >= 0:
            raise InvariantViolation("variance", f"must be >= 0, got {self.variance}")
        if self.n < 1:
            raise InvariantViolation("n", f"must be positive, got {self.n}")
        lo, hi = self.ci.lower, self.ci.upper
        if not (lo - _CONTAIN_TOL <= self.estimate <= hi + _CONTAIN_TOL):
            raise InvariantViolation(
                "ci", f"estimate {self.estimate} outside [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class WeightSpec:
    scheme: Scheme
    resolved: tuple[float, ...]

    def __post_init__(self):
        if len(self.resolved) == 0:
            raise InvariantViolation("weights", "no strata")
        if any(not (w >= 0) for w in self.resolved):
            raise InvariantViolation("weights", f"negative or NaN weight in {self.resolved}")
        total = math.fsum(self.resolved)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise InvariantViolation("weights", f"sum to {total!r}, not 1")

    @classmethod
    def normalized(cls, scheme: Scheme, raw: Sequence[float]) -> "WeightSpec":
        raw = [float(v) for v in raw]
        total = math.fsum(raw)
        if not total > 0:
            raise InvariantViolation("weights", f"raw weights {raw} do not have a positive sum")
        w = [v / total for v in raw]
        # fold residual round-off into the largest weight so the sum is 1 to 1e-12
        drift = 1.0 - math.fsum(w)
        k = max(range(len(w)), key=w.__getitem__)
        w[k] += drift
        return cls(scheme, tuple(w))

    @classmethod
    def fixed(cls, values: Sequence[float]) -> "WeightSpec":
        return cls.normalized(Scheme.FIXED, values)

    def __len__(self):
        return len(self.resolved)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme.value, "resolved": list(self.resolved)}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightSpec":
        return cls(Scheme(d["scheme"]), tuple(float(v) for v in d["resolved"]))


@dataclass(frozen=True)
class EffectResult:
    """One interval estimate for a pooled difference or ratio.

    ``gamma`` holds the adjusted per-stratum significance levels when the
    method uses them: ``(gamma_control, gamma_treated)`` for AC, ACL and YS,
    ``(gamma,)`` for the AC2 difference and ``(gamma_at_lower, gamma_at_upper)``
    for the AC2 ratio.
    """

    method: Method
    scale: Scale
    estimate: float
    ci: ConfidenceInterval
    weights: WeightSpec
    gamma: tuple[float, ...] | None = None
    corrections: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.method not in methods_for(self.scale):
            raise InvariantViolation(
                "method", f"{self.method.value} is not defined on the {self.scale.value} scale"
            )
        if (self.gamma is not None) != (self.method in GAMMA_METHODS):
            raise InvariantViolation(
                "gamma", f"presence does not match method {self.method.value}"
            )
        lo, hi = self.ci.lower, self.ci.upper
        if not (lo - _CONTAIN_TOL <= self.estimate <= hi + _CONTAIN_TOL):
            raise InvariantViolation(
                "ci", f"estimate {self.estimate} outside [{lo}, {hi}]"
            )

    @property
    def label(self) -> str:
        return f"{self.method.value}/{self.scale.value}/{self.weights.scheme.value}"

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "scale": self.scale.value,
            "estimate": _fmt_limit(self.estimate),
            "ci": self.ci.to_dict(),
            "weights": self.weights.to_dict(),
            "gamma": None if self.gamma is None else list(self.gamma),
            "corrections": list(self.corrections),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EffectResult":
        gamma = d.get("gamma")
        return cls(
            method=Method(d["method"]),
            scale=Scale(d["scale"]),
            estimate=_parse_limit(d["estimate"]),
            ci=ConfidenceInterval.from_dict(d["ci"]),
            weights=WeightSpec.from_dict(d["weights"]),
            gamma=None if gamma is None else tuple(float(g) for g in gamma),
            corrections=tuple(d.get("corrections", ())),
        )


Summaries = Sequence[Sequence[StratumGroupSummary]]


def validate_inputs(summaries: Summaries, weights: WeightSpec) -> tuple[Summaries, WeightSpec]:
    """Check an S x 2 bundle of summaries against a weight spec.

    ``summaries[s][g]`` is stratum ``s``, group ``g`` (0 = control, 1 = treated).
    Returns the bundle unchanged when every invariant holds.
    """
    if len(summaries) == 0:
        raise EmptyStrata("at least one stratum is required")
    for s, row in enumerate(summaries):
        if len(row) != 2 or any(cell is None for cell in row):
            raise GroupMissing(f"stratum {s} must have exactly two groups")
        for g, cell in enumerate(row):
            if not isinstance(cell, StratumGroupSummary):
                raise InvariantViolation(
                    f"summaries[{s}][{g}]", f"expected StratumGroupSummary, got {type(cell).__name__}"
                )
    if len(weights.resolved) != len(summaries):
        raise InvariantViolation(
            "weights", f"{len(weights.resolved)} weights for {len(summaries)} strata"
        )
    levels = {cell.ci.level for row in summaries for cell in row}
    if len(levels) > 1:
        raise InvariantViolation("ci.level", f"mixed one-sample levels {sorted(levels)}")
    return summaries, weights
