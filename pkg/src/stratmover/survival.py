"""Time-to-event backend: Kaplan-Meier fits, milestone survival and RMST
summaries, and the stratified MOVER analysis built on them."""

from __future__ import annotations

from dataclasses import dataclass, field
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
    BeyondFollowUp,
    EmptyGroup,
    GroupMissing,
    InvariantViolation,
    StrataCount,
    StratMoverError,
)
from .mover import z_crit


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: bool
    group: int
    stratum: str

    def __post_init__(self):
        if not self.time >= 0:
            raise InvariantViolation("time", f"must be >= 0, got {self.time}")
        if self.group not in (0, 1):
            raise InvariantViolation("group", f"must be 0 or 1, got {self.group}")


@dataclass(frozen=True)
class KMCurve:
    event_times: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    survival: np.ndarray
    greenwood_sum: np.ndarray  # cumulative sum of d / (n (n - d))
    greenwood_var: np.ndarray
    n: int
    max_time: float  # largest observed time (event or censoring)

    def step(self, t: float) -> int:
        """Number of event times <= t."""
        return int(np.searchsorted(self.event_times, t, side="right"))

    def survival_at(self, t: float) -> float:
        k = self.step(t)
        return 1.0 if k == 0 else float(self.survival[k - 1])


def km_fit(times: Sequence[float], events: Sequence[bool]) -> KMCurve:
    """Product-limit estimate with Greenwood variance.

    At tied times, events are counted before censorings (censored subjects
    are still at risk at their own censoring time).
    """
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    if t.size == 0:
        raise EmptyGroup("no records")
    uniq = np.unique(t[e])
    at_risk = np.array([(t >= u).sum() for u in uniq], dtype=float)
    d = np.array([((t == u) & e).sum() for u in uniq], dtype=float)
    surv = np.cumprod(1.0 - d / at_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(at_risk > d, d / (at_risk * (at_risk - d)), np.inf)
    gsum = np.cumsum(terms)
    with np.errstate(invalid="ignore"):
        # once survival hits zero the variance is zero (and stays there)
        var = np.where(surv > 0, surv**2 * gsum, 0.0)
    return KMCurve(uniq, at_risk, d, surv, gsum, var, int(t.size), float(t.max()))


def _check_follow_up(curve: KMCurve, t: float):
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    if t > curve.max_time:
        raise BeyondFollowUp(f"t={t} is beyond the last observed time {curve.max_time}")


def cloglog_limits(est, var, conf):
    """Complementary log-log CI for a survival probability, vectorised."""
    est = np.asarray(est, dtype=float)
    var = np.asarray(var, dtype=float)
    z = z_crit(1.0 - np.asarray(conf, dtype=float))
    interior = (est > 0) & (est < 1) & (var > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_s = np.log(est)
        se = np.sqrt(var) / (est * np.abs(log_s))
        lo = est ** np.exp(z * se)
        hi = est ** np.exp(-z * se)
    lo = np.where(interior, lo, est)
    hi = np.where(interior, hi, est)
    return lo, hi


def wald_limits(est, var, conf):
    z = z_crit(1.0 - np.asarray(conf, dtype=float))
    se = np.sqrt(np.asarray(var, dtype=float))
    return est - z * se, est + z * se


def milestone(curve: KMCurve, t: float, level: float = DEFAULT_LEVEL) -> StratumGroupSummary:
    """KM survival at ``t`` with its Greenwood variance and a cloglog CI."""
    _check_follow_up(curve, t)
    k = curve.step(t)
    if k == 0:
        est, var = 1.0, 0.0
    else:
        est, var = float(curve.survival[k - 1]), float(curve.greenwood_var[k - 1])
    lo, hi = cloglog_limits(est, var, level)
    return StratumGroupSummary(est, var, ConfidenceInterval(float(lo), float(hi), level), curve.n)


def rmst_value(curve: KMCurve, horizon: float) -> tuple[float, float]:
    """Exact step-function integral of S over [0, horizon] and its variance."""
    _check_follow_up(curve, horizon)
    k = curve.step(horizon)
    knots = np.concatenate([[0.0], curve.event_times[:k], [horizon]])
    levels = np.concatenate([[1.0], curve.survival[:k]])
    pieces = levels * np.diff(knots)
    area = float(pieces.sum())
    # A_i = integral of S from t_i to horizon
    tail = np.cumsum(pieces[::-1])[::-1][1:]
    d, r = curve.events[:k], curve.at_risk[:k]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(tail > 0, tail**2 * d / (r * (r - d)), 0.0)
    return area, float(terms.sum())


def rmst(curve: KMCurve, horizon: float, level: float = DEFAULT_LEVEL) -> StratumGroupSummary:
    est, var = rmst_value(curve, horizon)
    lo, hi = wald_limits(est, var, level)
    return StratumGroupSummary(est, var, ConfidenceInterval(float(lo), float(hi), level), curve.n)


@dataclass(frozen=True)
class ExternalCI:
    """A one-sample CI supplied from outside (e.g. a score-type interval)."""

    stratum: str
    group: int
    estimate: float
    lower: float
    upper: float
    level: float = DEFAULT_LEVEL
    variance: float | None = None
    n: int | None = None


@dataclass
class SurvivalSummaries:
    """S x 2 summaries plus the means of re-computing them at another level."""

    strata: list[str]
    summaries: list[list[StratumGroupSummary]]
    measure: str  # "milestone" or "rmst"
    refit: mover.Refit
    approximate_relevel: bool = False
    source: str = "default"
    notes: list[str] = field(default_factory=list)

    def arrays(self):
        return mover._arrays(self.summaries)


def _ordered_strata(records: Iterable[SurvivalRecord]) -> list[str]:
    seen: dict[str, None] = {}
    for r in records:
        seen.setdefault(r.stratum, None)
    return list(seen)


def _rescaled_refit(est, lo, hi, levels) -> mover.Refit:
    """Re-level fixed CIs by rescaling each half-width by z_new / z_old."""
    z_old = z_crit(1.0 - levels)

    def refit(conf):
        ratio = z_crit(1.0 - np.asarray(conf, dtype=float)) / z_old
        return est - (est - lo) * ratio, est + (hi - est) * ratio

    return refit


def make_summaries(records: Sequence[SurvivalRecord] | None, *, milestone_time: float | None = None,
                   horizon: float | None = None, external: Sequence[ExternalCI] | None = None,
                   level: float = DEFAULT_LEVEL) -> SurvivalSummaries:
    """Per stratum x group summaries of milestone survival or RMST.

    Exactly one of ``milestone_time`` / ``horizon`` selects the measure. With
    ``external`` CIs, their limits (and estimates) replace the default ones;
    the variance comes from the external entry, else from the KM fit, else it
    is recovered from the CI width. Re-leveling external CIs for the AC
    family is approximate and flagged.
    """
    if (milestone_time is None) == (horizon is None):
        raise ValueError("give exactly one of milestone_time or horizon")
    measure = "milestone" if milestone_time is not None else "rmst"
    fits: dict[tuple[str, int], StratumGroupSummary] = {}
    strata: list[str] = []
    if records:
        strata = _ordered_strata(records)
        for s in strata:
            for g in (0, 1):
                rows = [r for r in records if r.stratum == s and r.group == g]
                if not rows:
                    raise GroupMissing(f"stratum {s!r} has no records in group {g}")
                curve = km_fit([r.time for r in rows], [r.event for r in rows])
                if measure == "milestone":
                    fits[s, g] = milestone(curve, milestone_time, level)
                else:
                    fits[s, g] = rmst(curve, horizon, level)
    if external is None:
        if not records:
            raise ValueError("need survival records or external CIs")
        summaries = [[fits[s, g] for g in (0, 1)] for s in strata]
        est, var, _, _ = mover._arrays(summaries)
        limits = cloglog_limits if measure == "milestone" else wald_limits
        return SurvivalSummaries(strata, summaries, measure, lambda conf: limits(est, var, conf))

    by_key = {(e.stratum, int(e.group)): e for e in external}
    ext_strata = _ordered_strata(external)  # type: ignore[arg-type]
    if strata and set(ext_strata) != set(strata):
        raise InvariantViolation("external", f"strata {ext_strata} do not match the data strata {strata}")
    strata = strata or ext_strata
    if len(by_key) != 2 * len(strata) or len(external) != 2 * len(strata):
        raise InvariantViolation("external", f"need exactly one CI per stratum x group, got {len(external)}")
    levels = {e.level for e in external}
    if len(levels) != 1:
        raise InvariantViolation("external", f"mixed levels {sorted(levels)}")
    ext_level = levels.pop()
    summaries = []
    for s in strata:
        row = []
        for g in (0, 1):
            if (s, g) not in by_key:
                raise GroupMissing(f"external CIs lack stratum {s!r} group {g}")
            e = by_key[s, g]
            fit = fits.get((s, g))
            n = e.n if e.n is not None else (fit.n if fit else None)
            if n is None:
                raise InvariantViolation("external", f"stratum {s!r} group {g}: sample size n is required")
            variance = e.variance
            if variance is None:
                variance = fit.variance if fit else float(mover.recovered_variance(e.lower, e.upper, 1 - ext_level))
            row.append(StratumGroupSummary(e.estimate, variance,
                                           ConfidenceInterval(e.lower, e.upper, ext_level), int(n)))
        summaries.append(row)
    est, _, lo, hi = mover._arrays(summaries)
    return SurvivalSummaries(strata, summaries, measure, _rescaled_refit(est, lo, hi, ext_level),
                             approximate_relevel=True, source="external")


def survival_weights(summ: SurvivalSummaries, scheme: Scheme, fixed: Sequence[float] | None = None) -> WeightSpec:
    """MH weights from cell sizes; INV weights from the stratum-difference variance."""
    scheme = Scheme(scheme)
    if scheme is Scheme.MH:
        n = np.array([[c.n for c in row] for row in summ.summaries], dtype=float)
        return WeightSpec.normalized(scheme, n[:, 1] * n[:, 0] / n.sum(axis=1))
    if scheme is Scheme.INV:
        v = np.array([row[0].variance + row[1].variance for row in summ.summaries])
        if np.any(v <= 0):
            raise InvariantViolation("variance", "INV weights need a positive variance in every stratum")
        return WeightSpec.normalized(scheme, 1.0 / v)
    if scheme is Scheme.FIXED:
        if fixed is None:
            raise ValueError("FIXED scheme needs explicit weights")
        return WeightSpec.fixed(fixed)
    raise InvariantViolation("weights", "MR weights are defined for binary risk differences only")


def interaction_ci(strata: Sequence[tuple[float, ConfidenceInterval]], log_scale: bool = False) -> ConfidenceInterval:
    """MOVER CI for the difference between two stratum-level effects.

    With ``log_scale`` the inputs are positive ratios; the interval is built
    for the difference of their logarithms and exponentiated.
    """
    if len(strata) != 2:
        raise StrataCount(f"interaction CI needs exactly two strata, got {len(strata)}")
    (e1, c1), (e2, c2) = strata
    if log_scale:
        for e, c in strata:
            if e <= 0 or c.lower <= 0:
                raise InvariantViolation("ratio", "log-scale interaction needs positive ratios and limits")
        g1 = (np.log(e1), ConfidenceInterval(np.log(c1.lower), np.log(c1.upper), c1.level))
        g2 = (np.log(e2), ConfidenceInterval(np.log(c2.lower), np.log(c2.upper), c2.level))
        ci = mover.mover_diff_unstratified(g1, g2)
        return ConfidenceInterval(float(np.exp(ci.lower)), float(np.exp(ci.upper)), ci.level)
    return mover.mover_diff_unstratified((e1, c1), (e2, c2))


SURVIVAL_ORDER = {
    Scale.DIFFERENCE: (Method.AV, Method.AC, Method.AC2),
    Scale.RATIO: (Method.AV, Method.AVL, Method.AC, Method.ACL, Method.AC2),
}


@dataclass
class SurvivalAnalysis:
    results: list[EffectResult] = field(default_factory=list)
    failures: list[tuple[Method, Scale, str]] = field(default_factory=list)

    def get(self, method, scale=Scale.DIFFERENCE) -> EffectResult:
        for r in self.results:
            if r.method is Method(method) and r.scale is Scale(scale):
                return r
        raise KeyError((method, scale))


def analyze_survival(summ: SurvivalSummaries, scheme: Scheme = Scheme.MH,
                     methods: Iterable[Method] | None = None,
                     scales: Iterable[Scale] = (Scale.DIFFERENCE, Scale.RATIO),
                     fixed: Sequence[float] | None = None) -> SurvivalAnalysis:
    weights = survival_weights(summ, scheme, fixed)
    wanted = None if methods is None else {Method(m) for m in methods}
    s = summ.summaries
    alpha = 1.0 - s[0][0].ci.level
    approx = ("approximate_relevel",) if summ.approximate_relevel else ()
    dispatch = {
        (Method.AV, Scale.DIFFERENCE): lambda: mover.av_diff_ci(s, weights, alpha=alpha),
        (Method.AC, Scale.DIFFERENCE): lambda: mover.ac_diff_ci(s, weights, alpha=alpha, refit=summ.refit),
        (Method.AC2, Scale.DIFFERENCE): lambda: mover.ac2_diff_ci(s, weights, alpha=alpha, refit=summ.refit),
        (Method.AV, Scale.RATIO): lambda: mover.fieller_av_ratio(s, weights, alpha=alpha),
        (Method.AVL, Scale.RATIO): lambda: mover.avl_ratio_ci(s, weights, alpha=alpha),
        (Method.AC, Scale.RATIO): lambda: mover.fieller_ac_ratio(s, weights, alpha=alpha, refit=summ.refit),
        (Method.ACL, Scale.RATIO): lambda: mover.acl_ratio_ci(s, weights, alpha=alpha, refit=summ.refit),
        (Method.AC2, Scale.RATIO): lambda: mover.ac2_ratio_bisection(s, weights, alpha=alpha, refit=summ.refit),
    }
    out = SurvivalAnalysis()
    for scale in scales:
        scale = Scale(scale)
        for method in SURVIVAL_ORDER[scale]:
            if wanted is not None and method not in wanted:
                continue
            if method not in methods_for(scale):
                continue
            try:
                res = dispatch[method, scale]()
            except StratMoverError as exc:
                out.failures.append((method, scale, str(exc)))
                continue
            if approx and res.gamma is not None:
                res = EffectResult(res.method, res.scale, res.estimate, res.ci, res.weights,
                                   res.gamma, res.corrections + approx)
            out.results.append(res)
    return out
