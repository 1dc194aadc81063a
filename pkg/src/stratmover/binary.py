"""Stratified binary endpoints: Wilson intervals, MH/INV/MR weights and
the risk-difference / risk-ratio interval methods.

Counts are carried as arrays ``x`` and ``n`` of shape ``(..., S, 2)``
(group 0 = control, 1 = treated), matching the layout of :mod:`stratmover.mover`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import mover
from .core import (
    DEFAULT_LEVEL,
    ConfidenceInterval,
    EffectResult,
    Method,
    Scale,
    Scheme,
    StratumGroupSummary,
    WeightSpec,
    methods_for,
)
from .errors import (
    AllZeroVariances,
    DegenerateVariance,
    EmptyStrata,
    Incomputable,
    InvariantViolation,
    NoConvergence,
    NonpositiveEstimate,
    StratMoverError,
    ZeroDenominator,
    ZeroPooledRate,
)
from .mover import Limits, z_crit

MR_CONTINUITY_FACTOR = 3.0 / 16.0


@dataclass(frozen=True)
class BinaryStratum:
    x0: int
    n0: int
    x1: int
    n1: int

    def __post_init__(self):
        for g in (0, 1):
            x, n = getattr(self, f"x{g}"), getattr(self, f"n{g}")
            if n < 1:
                raise InvariantViolation(f"n{g}", f"group size must be positive, got {n}")
            if not 0 <= x <= n:
                raise InvariantViolation(f"x{g}", f"count {x} outside [0, {n}]")


class ZeroCellPolicy(str, Enum):
    NONE = "none"
    HALF_EVENT = "half-event"


def counts(data: Sequence[BinaryStratum]) -> tuple[np.ndarray, np.ndarray]:
    if len(data) == 0:
        raise EmptyStrata("no strata")
    x = np.array([[d.x0, d.x1] for d in data], dtype=float)
    n = np.array([[d.n0, d.n1] for d in data], dtype=float)
    return x, n


# --------------------------------------------------------------------------
# Wilson score interval
# --------------------------------------------------------------------------


def wilson_limits(x, n, conf):
    """Wilson score limits, vectorised over ``x``, ``n`` and ``conf``."""
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    z = z_crit(1.0 - np.asarray(conf, dtype=float))
    z2 = z * z
    p = x / n
    centre = (x + z2 / 2.0) / (n + z2)
    half = z * np.sqrt(x * (n - x) / n + z2 / 4.0) / (n + z2)
    lo = centre - half
    hi = centre + half
    # exact boundary values; the formula only reaches them up to round-off
    lo = np.where(x == 0, 0.0, np.clip(lo, 0.0, p))
    hi = np.where(x == n, 1.0, np.clip(hi, p, 1.0))
    return lo, hi


def wilson_ci(x: int, n: int, level: float = DEFAULT_LEVEL) -> ConfidenceInterval:
    if n < 1 or not 0 <= x <= n:
        raise InvariantViolation("x", f"need 0 <= x <= n and n >= 1, got x={x}, n={n}")
    lo, hi = wilson_limits(x, n, level)
    return ConfidenceInterval(float(lo), float(hi), level)


def wilson_refit(x, n) -> mover.Refit:
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    return lambda conf: wilson_limits(x, n, conf)


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------


def adjusted_rates(x, n, policy: ZeroCellPolicy = ZeroCellPolicy.NONE):
    """Proportions used for weights and variances (never for point estimates)."""
    p = np.asarray(x, dtype=float) / n
    if ZeroCellPolicy(policy) is ZeroCellPolicy.HALF_EVENT:
        p = np.where(x == 0, 0.5 / n, np.where(x == n, 1.0 - 0.5 / n, p))
    return p


def stratum_rd_variance(x, n, policy=ZeroCellPolicy.NONE):
    p = adjusted_rates(x, n, policy)
    return np.sum(p * (1.0 - p) / n, axis=-1)


def _normalize(raw):
    with np.errstate(invalid="ignore", divide="ignore"):
        return raw / np.sum(raw, axis=-1, keepdims=True)


def mh_weights(n):
    n = np.asarray(n, dtype=float)
    return _normalize(n[..., 1] * n[..., 0] / n.sum(axis=-1))


def inv_weights(x, n, policy=ZeroCellPolicy.NONE):
    v = stratum_rd_variance(x, n, policy)
    zero = v <= 0
    with np.errstate(divide="ignore"):
        raw = np.where(zero.any(axis=-1, keepdims=True), zero.astype(float), 1.0 / v)
    w = _normalize(raw)
    return np.where(zero.all(axis=-1, keepdims=True), np.nan, w)


def mr_weights(x, n, policy=ZeroCellPolicy.NONE):
    """Minimum-risk weights: ``w ∝ (diag(V) + d d')^{-1} 1``.

    ``d_s`` is the stratum risk difference minus its stratum-size-weighted
    average, so ``w`` minimises the variance plus squared bias of the pooled
    estimate around the size-weighted target. With two strata this reduces to
    ``w_1 = (V_2 + f_1 D^2) / (V_1 + V_2 + D^2)``, ``D = delta_2 - delta_1``.
    """
    n = np.asarray(n, dtype=float)
    p = adjusted_rates(x, n, policy)
    v = np.sum(p * (1.0 - p) / n, axis=-1)
    delta = p[..., 1] - p[..., 0]
    size = n.sum(axis=-1)
    f = size / size.sum(axis=-1, keepdims=True)
    d = delta - np.sum(f * delta, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        dinv1 = 1.0 / v
        dinvd = d / v
        k = np.sum(dinvd, axis=-1, keepdims=True) / (1.0 + np.sum(d * dinvd, axis=-1, keepdims=True))
        raw = dinv1 - dinvd * k
    w = _normalize(raw)
    return np.where(np.all(v > 0, axis=-1, keepdims=True), w, np.nan)


def batch_weights(x, n, scheme: Scheme, policy=ZeroCellPolicy.NONE, fixed=None):
    scheme = Scheme(scheme)
    if scheme is Scheme.MH:
        return mh_weights(n)
    if scheme is Scheme.INV:
        return inv_weights(x, n, policy)
    if scheme is Scheme.MR:
        return mr_weights(x, n, policy)
    if fixed is None:
        raise ValueError("FIXED scheme needs explicit weights")
    w = np.asarray(fixed, dtype=float)
    return np.broadcast_to(w / w.sum(), np.shape(n)[:-1])


def resolve_weights(data: Sequence[BinaryStratum], scheme: Scheme, policy=ZeroCellPolicy.NONE,
                    fixed: Sequence[float] | None = None) -> WeightSpec:
    scheme = Scheme(scheme)
    x, n = counts(data)
    if scheme is Scheme.FIXED:
        if fixed is None or len(fixed) != len(data):
            raise InvariantViolation("weights", "FIXED scheme needs one weight per stratum")
        return WeightSpec.fixed(fixed)
    if scheme is Scheme.MH:
        raw = n[:, 1] * n[:, 0] / n.sum(axis=1)
    else:
        raw = batch_weights(x, n, scheme, policy)
        if np.any(np.isnan(raw)):
            raise DegenerateVariance(
                f"{scheme.value} weights undefined: every stratum variance is zero"
                if scheme is Scheme.INV else "MR weights need a positive variance in every stratum"
            )
    return WeightSpec.normalized(scheme, raw)


def mr_correction(n):
    """Continuity correction c for MR-weighted intervals, batched over leading axes."""
    n = np.asarray(n, dtype=float)
    return MR_CONTINUITY_FACTOR / np.sum(n[..., 1] * n[..., 0] / n.sum(axis=-1), axis=-1)


def mr_continuity(data: Sequence[BinaryStratum]) -> float:
    _, n = counts(data)
    return float(mr_correction(n))


# --------------------------------------------------------------------------
# interval methods (batched)
# --------------------------------------------------------------------------


def _rates(x, n):
    return np.asarray(x, dtype=float) / n


def wald_rd(x, n, w, alpha) -> Limits:
    p = _rates(x, n)
    tau = np.sum(w * (p[..., 1] - p[..., 0]), axis=-1)
    se = np.sqrt(np.sum(w**2 * np.sum(p * (1 - p) / n, axis=-1), axis=-1))
    z = z_crit(alpha)
    return Limits(tau, tau - z * se, tau + z * se)


def asy_rr(x, n, w, alpha) -> Limits:
    p = _rates(x, n)
    t = np.einsum("...s,...sg->...g", w, p)
    v = np.einsum("...s,...sg->...g", w**2, p * (1 - p) / n)
    ok = np.all(t > 0, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rr = t[..., 1] / t[..., 0]
        se = np.sqrt(v[..., 1] / t[..., 1] ** 2 + v[..., 0] / t[..., 0] ** 2)
    z = z_crit(alpha)
    rr = np.where(ok, rr, np.nan)
    return Limits(rr, rr * np.exp(-z * se), rr * np.exp(z * se))


def dc_rd(x, n, alpha) -> Limits:
    """MH risk difference with the dually consistent (Sato-type) variance."""
    p = _rates(x, n)
    w = mh_weights(n)
    p0, p1 = p[..., 0], p[..., 1]
    n0, n1 = n[..., 0], n[..., 1]
    t = np.sum(w * (p1 - p0), axis=-1)
    tt = t[..., None]
    v1 = ((p0 + tt) * (1 - p1) + p1 * (1 - p0 - tt)) / (2 * n1)
    v0 = ((p1 - tt) * (1 - p0) + p0 * (1 - p1 + tt)) / (2 * n0)
    var = np.sum(w**2 * (v1 + v0), axis=-1)
    ok = (np.sum(np.asarray(x), axis=(-1, -2)) > 0) & (var >= 0)
    with np.errstate(invalid="ignore"):
        se = np.where(ok, np.sqrt(np.where(ok, var, 0.0)), np.nan)
    z = z_crit(alpha)
    return Limits(t, t - z * se, t + z * se)


def dc_rr(x, n, alpha) -> Limits:
    """MH risk ratio with the dually consistent (Greenland-Robins) log variance."""
    x = np.asarray(x, dtype=float)
    p = x / n
    big = n[..., 1] * n[..., 0] / n.sum(axis=-1)  # unnormalised MH weights
    pbar = x.sum(axis=-1) / n.sum(axis=-1)
    s0 = np.sum(big * p[..., 0], axis=-1)
    s1 = np.sum(big * p[..., 1], axis=-1)
    num = np.sum(big * (pbar - p[..., 0] * p[..., 1]), axis=-1)
    ok = (s0 > 0) & (s1 > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rr = np.where(ok, s1 / s0, np.nan)
        se = np.sqrt(num / (s0 * s1))
    z = z_crit(alpha)
    return Limits(rr, rr * np.exp(-z * se), rr * np.exp(z * se))


def ys_rd(x, n, w, alpha, sigma) -> Limits:
    p = _rates(x, n)
    pooled = mover.pooled_group_limits(p, sigma, w, alpha, wilson_refit(x, n))
    L, U = pooled.L, pooled.U
    lam = np.einsum("...s,...sg->...g", w**2, 1.0 / n)
    tau = pooled.tau[..., 1] - pooled.tau[..., 0]
    s_lo = lam[..., 1] * L[..., 1] * (1 - L[..., 1]) + lam[..., 0] * U[..., 0] * (1 - U[..., 0])
    s_hi = lam[..., 1] * U[..., 1] * (1 - U[..., 1]) + lam[..., 0] * L[..., 0] * (1 - L[..., 0])
    z = z_crit(alpha)
    return Limits(tau, tau - z * np.sqrt(s_lo), tau + z * np.sqrt(s_hi), pooled.gamma)


def binary_interval(x, n, w, method: Method, scale: Scale, alpha: float,
                    policy=ZeroCellPolicy.NONE) -> Limits:
    """One method on one scale for (batched) counts, without MR correction."""
    method, scale = Method(method), Scale(scale)
    if method not in methods_for(scale):
        raise ValueError(f"{method.value} is not defined on the {scale.value} scale")
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    p = x / n
    pa = adjusted_rates(x, n, policy)
    var = pa * (1 - pa) / n
    sigma = np.sqrt(var)
    lo, hi = wilson_limits(x, n, 1.0 - alpha)
    refit = wilson_refit(x, n)
    if scale is Scale.DIFFERENCE:
        if method is Method.WALD:
            return wald_rd(x, n, w, alpha)
        if method is Method.DC:
            return dc_rd(x, n, alpha)
        if method is Method.YS:
            return ys_rd(x, n, w, alpha, sigma)
        if method is Method.AV:
            return mover.av_diff(p, lo, hi, w)
        if method is Method.AC:
            return mover.ac_diff(p, sigma, w, alpha, refit)
        if method is Method.AC2:
            return mover.ac2_diff(p, var, w, alpha, refit)
    else:
        if method is Method.ASY:
            return asy_rr(x, n, w, alpha)
        if method is Method.DC:
            return dc_rr(x, n, alpha)
        if method is Method.AV:
            return mover.av_ratio(p, lo, hi, w)
        if method is Method.AVL:
            return mover.avl_ratio(p, lo, hi, w)
        if method is Method.AC:
            return mover.ac_ratio(p, sigma, w, alpha, refit)
        if method is Method.ACL:
            return mover.acl_ratio(p, sigma, w, alpha, refit)
        if method is Method.AC2:
            return mover.ac2_ratio(p, var, w, alpha, refit)
    raise AssertionError("unreachable")


def mr_corrected(method: Method, mr_correct_av: bool = False) -> bool:
    """Whether an MR-weighted difference interval gets the continuity widening."""
    return method is not Method.AV or mr_correct_av


# --------------------------------------------------------------------------
# scalar API
# --------------------------------------------------------------------------


def binary_summaries(data: Sequence[BinaryStratum], level: float = DEFAULT_LEVEL,
                     policy=ZeroCellPolicy.NONE) -> list[list[StratumGroupSummary]]:
    """Per-cell summaries (raw proportion, binomial variance, Wilson CI)."""
    x, n = counts(data)
    pa = adjusted_rates(x, n, policy)
    lo, hi = wilson_limits(x, n, level)
    return [
        [
            StratumGroupSummary(
                float(x[s, g] / n[s, g]),
                float(pa[s, g] * (1 - pa[s, g]) / n[s, g]),
                ConfidenceInterval(float(lo[s, g]), float(hi[s, g]), level),
                int(n[s, g]),
            )
            for g in (0, 1)
        ]
        for s in range(len(data))
    ]


def _explain_nan(method: Method, scale: Scale, x, n, w, policy) -> StratMoverError:
    t = w @ (x / n)
    if method is Method.DC and scale is Scale.DIFFERENCE:
        return Incomputable("DC variance undefined: no events in the study")
    if scale is Scale.RATIO:
        if t[0] == 0 and t[1] == 0:
            return ZeroDenominator("both pooled rates are zero")
        if method in (Method.ASY, Method.DC):
            return ZeroPooledRate("a pooled group rate is zero")
        if method in (Method.AVL, Method.ACL):
            return NonpositiveEstimate("log-ratio interval needs positive pooled rates and limits")
        if method is Method.AC2:
            return NoConvergence("AC2 ratio limit could not be bracketed")
    pa = adjusted_rates(x, n, policy)
    sig = np.sqrt(pa * (1 - pa) / n)
    if method in (Method.AC, Method.ACL, Method.YS, Method.AC2) and np.any(~np.any(w[:, None] * sig > 0, axis=0)):
        return AllZeroVariances("a group has zero variance in every stratum; use the half-event policy")
    return Incomputable(f"{method.value} on the {scale.value} scale is not computable for these data")


def binary_effect(data: Sequence[BinaryStratum], method: Method, scale: Scale, weights: WeightSpec,
                  level: float = DEFAULT_LEVEL, policy=ZeroCellPolicy.NONE,
                  mr_correct_av: bool = False) -> EffectResult:
    method, scale = Method(method), Scale(scale)
    x, n = counts(data)
    if len(weights.resolved) != len(data):
        raise InvariantViolation("weights", f"{len(weights.resolved)} weights for {len(data)} strata")
    if method is Method.DC and weights.scheme is not Scheme.MH:
        raise InvariantViolation("weights", "DC intervals are defined for MH weights only")
    if weights.scheme is Scheme.MR and scale is Scale.RATIO:
        raise InvariantViolation("weights", "MR weights are defined for the risk difference only")
    alpha = 1.0 - level
    w = np.asarray(weights.resolved)
    res = binary_interval(x, n, w, method, scale, alpha, policy)
    lo, hi, est = float(res.lower), float(res.upper), float(res.estimate)
    if not (np.isfinite(est) and not np.isnan(lo) and not np.isnan(hi)):
        raise _explain_nan(method, scale, x, n, w, policy)
    corrections = []
    if weights.scheme is Scheme.MR and scale is Scale.DIFFERENCE and mr_corrected(method, mr_correct_av):
        c = float(mr_correction(n))
        lo, hi = lo - c, hi + c
        corrections.append(f"mr_continuity:{c!r}")
    if res.lower_clamped is not None and bool(res.lower_clamped):
        corrections.append("ratio_lower_set_to_0")
    if res.upper_clamped is not None and bool(res.upper_clamped):
        corrections.append("ratio_upper_unbounded")
    gamma = None
    if res.gamma is not None:
        gamma = tuple(float(g) for g in np.atleast_1d(res.gamma))
    return EffectResult(method, scale, est, ConfidenceInterval(lo, hi, level), weights,
                        gamma=gamma, corrections=tuple(corrections))


def wald_rd_ci(data, weights: WeightSpec, level: float = DEFAULT_LEVEL) -> EffectResult:
    return binary_effect(data, Method.WALD, Scale.DIFFERENCE, weights, level)


def asy_rr_ci(data, weights: WeightSpec, level: float = DEFAULT_LEVEL) -> EffectResult:
    return binary_effect(data, Method.ASY, Scale.RATIO, weights, level)


def dc_rd_ci(data, level: float = DEFAULT_LEVEL) -> EffectResult:
    return binary_effect(data, Method.DC, Scale.DIFFERENCE, resolve_weights(data, Scheme.MH), level)


def dc_rr_ci(data, level: float = DEFAULT_LEVEL) -> EffectResult:
    return binary_effect(data, Method.DC, Scale.RATIO, resolve_weights(data, Scheme.MH), level)


def ys_rd_ci(data, weights: WeightSpec, level: float = DEFAULT_LEVEL,
             policy=ZeroCellPolicy.NONE) -> EffectResult:
    return binary_effect(data, Method.YS, Scale.DIFFERENCE, weights, level, policy)


def unstratified_bias(p10: float, p20: float, n10: float, n20: float, r1: float, r2: float,
                      delta: float = 0.0) -> float:
    """Bias of the crude (unstratified) risk difference for two strata.

    ``r_s = n_s1 / n_s0``. The bias does not depend on the common risk
    difference ``delta``; it vanishes when ``p10 == p20`` or ``r1 == r2``.
    """
    return n10 * n20 * (r1 - r2) * (p10 - p20) / ((n10 * r1 + n20 * r2) * (n10 + n20))


@dataclass
class BinaryAnalysis:
    results: list[EffectResult] = field(default_factory=list)
    failures: list[tuple[Method, Scale, str]] = field(default_factory=list)

    def get(self, method, scale=Scale.DIFFERENCE) -> EffectResult:
        for r in self.results:
            if r.method is Method(method) and r.scale is Scale(scale):
                return r
        raise KeyError((method, scale))


TABLE_ORDER = {
    Scale.DIFFERENCE: (Method.DC, Method.WALD, Method.AV, Method.YS, Method.AC, Method.AC2),
    Scale.RATIO: (Method.DC, Method.ASY, Method.AV, Method.AVL, Method.AC, Method.AC2, Method.ACL),
}


def applicable(method: Method, scale: Scale, scheme: Scheme) -> bool:
    """Method x scale x scheme combinations that analyze_binary reports."""
    if method not in methods_for(scale):
        return False
    if method is Method.DC and scheme is not Scheme.MH:
        return False
    if scheme is Scheme.MR and scale is Scale.RATIO:
        return False
    return True


def analyze_binary(data: Sequence[BinaryStratum], scheme: Scheme = Scheme.MH,
                   methods: Iterable[Method] | None = None, level: float = DEFAULT_LEVEL,
                   policy=ZeroCellPolicy.NONE, scales: Iterable[Scale] = (Scale.DIFFERENCE, Scale.RATIO),
                   fixed: Sequence[float] | None = None, mr_correct_av: bool = False) -> BinaryAnalysis:
    """Every applicable requested method on every requested scale.

    Unsupported method/scale/scheme combinations are skipped silently; a
    method that fails on these data is recorded in ``failures`` and the rest
    of the batch still runs.
    """
    scheme = Scheme(scheme)
    wanted = None if methods is None else {Method(m) for m in methods}
    out = BinaryAnalysis()
    weights = resolve_weights(data, scheme, policy, fixed)
    for scale in scales:
        scale = Scale(scale)
        for method in TABLE_ORDER[scale]:
            if wanted is not None and method not in wanted:
                continue
            if not applicable(method, scale, scheme):
                continue
            try:
                out.results.append(binary_effect(data, method, scale, weights, level, policy, mr_correct_av))
            except StratMoverError as exc:
                out.failures.append((method, scale, str(exc)))
    return out
