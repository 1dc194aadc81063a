"""MOVER interval constructors for stratified differences and ratios.

Array conventions used throughout: per-cell quantities have shape
``(..., S, 2)`` with the last axis indexing the group (0 = control,
1 = treated); weights have shape ``(..., S)``. Leading axes are batch
axes, which lets the simulation harness evaluate many replicates in one
call. Batch functions never raise on data-dependent failures; they return
NaN limits instead, and the scalar wrappers at the bottom of the module
turn those cases into exceptions.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
from scipy.special import ndtr, ndtri

from .core import (
    ConfidenceInterval,
    EffectResult,
    Method,
    Scale,
    StratumGroupSummary,
    Summaries,
    WeightSpec,
    validate_inputs,
)
from .errors import (
    AllZeroVariances,
    MalformedInterval,
    NoConvergence,
    NonpositiveEstimate,
    RefitUnavailable,
    ZeroDenominator,
)

# refit(conf) -> (lower, upper): one-sample limits re-computed at confidence
# level ``conf`` (broadcastable to the (..., S, 2) cell shape)
Refit = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
# diff_provider(conf, phi) -> (lower, upper) of shape (..., S) for delta_s1 - phi * delta_s0
DiffProvider = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

BISECT_RTOL = 1e-10
BISECT_MAXITER = 200
BRACKET_DOUBLINGS = 60


class Limits(NamedTuple):
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    gamma: np.ndarray | None = None
    # boolean masks of limits replaced by a boundary value (0 or +inf)
    lower_clamped: np.ndarray | None = None
    upper_clamped: np.ndarray | None = None


def z_crit(alpha):
    """Upper alpha/2 normal quantile."""
    return -ndtri(np.asarray(alpha, dtype=float) / 2.0)


def _wsum(w, cells):
    # sum over strata of w_s * cells[..., s, g]
    return np.einsum("...s,...sg->...g", w, cells)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def mover_limits(est1, l1, u1, est0, l0, u0, phi=1.0):
    """Two-group MOVER limits for ``tau1 - phi * tau0`` (phi >= 0)."""
    phi = np.asarray(phi, dtype=float)
    d = est1 - phi * est0
    lo = d - np.sqrt((l1 - est1) ** 2 + phi**2 * (u0 - est0) ** 2)
    hi = d + np.sqrt((u1 - est1) ** 2 + phi**2 * (l0 - est0) ** 2)
    return d, lo, hi


def gamma_from_sigmas(w, sigma, alpha):
    """Adjusted level gamma from weights and per-stratum SDs along the last axis.

    The per-stratum critical value is the pooled one shrunk by
    ``sqrt(sum w^2 sigma^2) / sum w sigma``. NaN where every sigma is zero.
    """
    w = np.asarray(w, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    num = np.sqrt(np.sum(w**2 * sigma**2, axis=-1))
    den = np.sum(w * sigma, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(den > 0, num / den, np.nan)
    # Cauchy-Schwarz gives ratio <= 1 and so gamma >= alpha; trim round-off
    ratio = np.minimum(ratio, 1.0)
    return np.maximum(2.0 * ndtr(-ratio * z_crit(alpha)), alpha)


def recovered_variance(lower, upper, alpha):
    """Variance recovered from a CI's width: (u - l)^2 / (4 z^2)."""
    z = z_crit(alpha)
    return (np.asarray(upper) - np.asarray(lower)) ** 2 / (4.0 * z**2)


# --------------------------------------------------------------------------
# difference scale
# --------------------------------------------------------------------------


def _per_row(phi):
    # a batch of phi values must broadcast against the stratum axis
    phi = np.asarray(phi, dtype=float)
    return phi[..., None] if phi.ndim else phi


def av_diff(est, lower, upper, w, phi=1.0) -> Limits:
    w = np.asarray(w, dtype=float)
    ph = _per_row(phi)
    e1, e0 = est[..., 1], est[..., 0]
    tau = np.sum(w * (e1 - ph * e0), axis=-1)
    s_lo = np.sum(w**2 * ((lower[..., 1] - e1) ** 2 + ph**2 * (upper[..., 0] - e0) ** 2), axis=-1)
    s_hi = np.sum(w**2 * ((upper[..., 1] - e1) ** 2 + ph**2 * (lower[..., 0] - e0) ** 2), axis=-1)
    return Limits(tau, tau - np.sqrt(s_lo), tau + np.sqrt(s_hi))


class Pooled(NamedTuple):
    tau: np.ndarray  # (..., 2) weighted group estimates
    L: np.ndarray  # (..., 2)
    U: np.ndarray  # (..., 2)
    gamma: np.ndarray  # (..., 2)


def pooled_group_limits(est, sigma, w, alpha, refit: Refit) -> Pooled:
    """Weighted sums of the level-(1 - gamma_g) stratum limits, per group."""
    w = np.asarray(w, dtype=float)
    # gamma per group: move the stratum axis last
    g = gamma_from_sigmas(w[..., None, :], np.swapaxes(sigma, -1, -2), alpha)
    # a group whose stratum CIs are all points has no level to adjust
    lo0, hi0 = refit(np.full_like(g, 1.0 - alpha)[..., None, :])
    point = np.all(np.broadcast_to(lo0 == hi0, np.shape(sigma)), axis=-2)
    g = np.where(np.isnan(g) & point, alpha, g)
    lo, hi = refit(1.0 - g[..., None, :])
    return Pooled(_wsum(w, est), _wsum(w, lo), _wsum(w, hi), g)


def ac_diff(est, sigma, w, alpha, refit: Refit, phi=1.0) -> Limits:
    pooled = pooled_group_limits(est, sigma, w, alpha, refit)
    t, L, U = pooled.tau, pooled.L, pooled.U
    tau, lo, hi = mover_limits(t[..., 1], L[..., 1], U[..., 1], t[..., 0], L[..., 0], U[..., 0], phi)
    return Limits(tau, lo, hi, pooled.gamma)


def _stratum_mover(refit: Refit, est) -> DiffProvider:
    def provider(conf, phi):
        lo, hi = refit(conf)
        ph = _per_row(phi)
        _, dl, du = mover_limits(est[..., 1], lo[..., 1], hi[..., 1], est[..., 0], lo[..., 0], hi[..., 0], ph)
        return dl, du

    return provider


def ac2_diff(est, var, w, alpha, refit: Refit, phi=1.0, diff_provider: DiffProvider | None = None) -> Limits:
    """Weighted sum of level-(1 - gamma) per-stratum difference intervals."""
    w = np.asarray(w, dtype=float)
    ph = _per_row(phi)
    sig_s = np.sqrt(var[..., 1] + ph**2 * var[..., 0])
    g = gamma_from_sigmas(w, sig_s, alpha)
    provider = diff_provider or _stratum_mover(refit, est)
    dl, du = provider((1.0 - g)[..., None, None], phi)
    tau = np.sum(w * (est[..., 1] - ph * est[..., 0]), axis=-1)
    return Limits(tau, np.sum(w * dl, axis=-1), np.sum(w * du, axis=-1), g)


# --------------------------------------------------------------------------
# ratio scale
# --------------------------------------------------------------------------


def fieller_limits(t1, t0, e1_lo, e1_hi, e0_lo, e0_hi) -> Limits:
    """Ratio limits from inverting the MOVER interval for ``tau1 - phi * tau0``.

    ``e1_lo`` is the squared recovered lower margin of group 1 (paired with the
    upper margin ``e0_hi`` of group 0 for the lower ratio limit), and so on.
    A lower limit with no root in (0, inf) is set to 0; an upper limit whose
    leading coefficient is <= 0 is +inf. Both are flagged in the masks.
    """
    t1, t0 = np.asarray(t1, dtype=float), np.asarray(t0, dtype=float)
    b = t1 * t0
    a_l = t0**2 - e0_hi
    c_l = t1**2 - e1_lo
    a_u = t0**2 - e0_lo
    c_u = t1**2 - e1_hi
    with np.errstate(invalid="ignore", divide="ignore"):
        est = t1 / t0
        disc_l = np.sqrt(np.maximum(b**2 - a_l * c_l, 0.0))
        # c / (b + sqrt) is the smaller root, stable when a_l -> 0
        lower = np.where(c_l > 0, c_l / (b + disc_l), 0.0)
        disc_u = np.sqrt(np.maximum(b**2 - a_u * c_u, 0.0))
        upper = np.where(a_u > 0, (b + disc_u) / a_u, np.inf)
    lower_clamped = (c_l < 0) & (t1 > 0)
    upper_clamped = a_u <= 0
    return Limits(est, lower, upper, None, lower_clamped, upper_clamped)


def fieller_z(phi, tau1, tau0, v1, v0):
    """Test statistic (tau1 - phi tau0) / sqrt(v1 + phi^2 v0); decreasing in phi."""
    phi = np.asarray(phi, dtype=float)
    return (tau1 - phi * tau0) / np.sqrt(v1 + phi**2 * v0)


def _recovered_sq(w, est, lim, g):
    return np.sum(np.asarray(w) ** 2 * (lim[..., g] - est[..., g]) ** 2, axis=-1)


def av_ratio(est, lower, upper, w) -> Limits:
    t = _wsum(w, est)
    return fieller_limits(
        t[..., 1],
        t[..., 0],
        _recovered_sq(w, est, lower, 1),
        _recovered_sq(w, est, upper, 1),
        _recovered_sq(w, est, lower, 0),
        _recovered_sq(w, est, upper, 0),
    )


def avl_ratio(est, lower, upper, w) -> Limits:
    t = _wsum(w, est)
    t1, t0 = t[..., 1], t[..., 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.log(t1 / t0)
        s_lo = _recovered_sq(w, est, lower, 1) / t1**2 + _recovered_sq(w, est, upper, 0) / t0**2
        s_hi = _recovered_sq(w, est, upper, 1) / t1**2 + _recovered_sq(w, est, lower, 0) / t0**2
        ok = (t1 > 0) & (t0 > 0)
        lo = np.where(ok, np.exp(r - np.sqrt(s_lo)), np.nan)
        hi = np.where(ok, np.exp(r + np.sqrt(s_hi)), np.nan)
        return Limits(np.where(ok, t1 / t0, np.nan), lo, hi)


def ac_ratio(est, sigma, w, alpha, refit: Refit) -> Limits:
    p = pooled_group_limits(est, sigma, w, alpha, refit)
    t, L, U = p.tau, p.L, p.U
    res = fieller_limits(
        t[..., 1],
        t[..., 0],
        (L[..., 1] - t[..., 1]) ** 2,
        (U[..., 1] - t[..., 1]) ** 2,
        (L[..., 0] - t[..., 0]) ** 2,
        (U[..., 0] - t[..., 0]) ** 2,
    )
    return res._replace(gamma=p.gamma)


def acl_ratio(est, sigma, w, alpha, refit: Refit) -> Limits:
    p = pooled_group_limits(est, sigma, w, alpha, refit)
    t, L, U = p.tau, p.L, p.U
    ok = np.all((t > 0) & (L > 0) & (U > 0), axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.log(t[..., 1] / t[..., 0])
        s_lo = np.log(L[..., 1] / t[..., 1]) ** 2 + np.log(U[..., 0] / t[..., 0]) ** 2
        s_hi = np.log(U[..., 1] / t[..., 1]) ** 2 + np.log(L[..., 0] / t[..., 0]) ** 2
        lo = np.where(ok, np.exp(r - np.sqrt(s_lo)), np.nan)
        hi = np.where(ok, np.exp(r + np.sqrt(s_hi)), np.nan)
        est_r = np.where(ok, t[..., 1] / t[..., 0], np.nan)
    return Limits(est_r, lo, hi, p.gamma)


def _bisect_decreasing(f, start):
    """Find the root of a decreasing function f, vectorised over rows.

    ``start`` is the initial guess per row; rows where it is NaN are skipped.
    Returns (root, converged, bracket_lo, bracket_hi, residual, bracket_failed).
    """
    start = np.asarray(start, dtype=float)
    n = start.shape
    lo = np.full(n, np.nan)
    hi = np.full(n, np.nan)
    active = np.isfinite(start) & (start > 0)
    f0 = np.where(active, f(np.where(active, start, 1.0)), np.nan)
    up = active & (f0 > 0)  # root lies above the start
    down = active & (f0 <= 0)
    lo[up], hi[down] = start[up], start[down]
    # expand upward
    probe = start.copy()
    need = up.copy()
    for _ in range(BRACKET_DOUBLINGS):
        if not need.any():
            break
        probe = np.where(need, probe * 2.0, probe)
        fp = f(np.where(need, probe, 1.0))
        got = need & (fp <= 0)
        hi[got] = probe[got]
        lo = np.where(need & ~got, probe, lo)
        need &= ~got
    fail = need.copy()
    # expand downward
    probe = start.copy()
    need = down.copy()
    for _ in range(BRACKET_DOUBLINGS):
        if not need.any():
            break
        probe = np.where(need, probe / 2.0, probe)
        fp = f(np.where(need, probe, 1.0))
        got = need & (fp > 0)
        lo[got] = probe[got]
        hi = np.where(need & ~got, probe, hi)
        need &= ~got
    fail |= need
    ok = active & ~fail
    a = np.where(ok, lo, 1.0)
    bnd = np.where(ok, hi, 1.0)
    for _ in range(BISECT_MAXITER):
        open_ = ok & (bnd - a > BISECT_RTOL * bnd)
        if not open_.any():
            break
        mid = 0.5 * (a + bnd)
        fm = f(mid)
        go_up = open_ & (fm > 0)
        go_dn = open_ & ~(fm > 0)
        a = np.where(go_up, mid, a)
        bnd = np.where(go_dn, mid, bnd)
    converged = ok & (bnd - a <= BISECT_RTOL * bnd)
    root = np.where(converged, 0.5 * (a + bnd), np.nan)
    resid = np.where(converged, f(np.where(converged, root, 1.0)), np.nan)
    return root, converged, np.where(ok, lo, np.nan), np.where(ok, hi, np.nan), resid, fail & active


def ac2_ratio(est, var, w, alpha, refit: Refit, sigma=None, diff_provider: DiffProvider | None = None) -> Limits:
    """Fieller-type ratio limits from the AC2 difference interval, by bisection.

    Each limit is bracketed starting from the AC (closed-form Fieller) limit.
    Rows that cannot be bracketed within the doubling budget come back NaN.
    """
    w = np.asarray(w, dtype=float)
    if sigma is None:
        sigma = np.sqrt(var)
    t = _wsum(w, est)
    t1, t0 = t[..., 1], t[..., 0]
    start = ac_ratio(est, sigma, w, alpha, refit)

    def f_lower(phi):
        return ac2_diff(est, var, w, alpha, refit, phi, diff_provider).lower

    def f_upper(phi):
        return ac2_diff(est, var, w, alpha, refit, phi, diff_provider).upper

    with np.errstate(invalid="ignore", divide="ignore"):
        est_r = t1 / t0
    # lower limit: 0 when tau1 = 0 or when the interval at phi = 0 already covers 0
    f_at0 = f_lower(np.zeros_like(t1))
    lower_zero = (t1 <= 0) | (f_at0 <= 0)
    guess_lo = np.where(lower_zero, np.nan, np.where(start.lower > 0, start.lower, est_r / 2.0))
    root_lo, conv_lo, *_ = _bisect_decreasing(f_lower, guess_lo)
    lower = np.where(lower_zero, 0.0, root_lo)

    upper_inf = t0 <= 0
    fallback = np.where(est_r > 0, 2.0 * est_r, 1.0)
    guess_hi = np.where(upper_inf, np.nan, np.where(np.isfinite(start.upper), start.upper, fallback))
    root_hi, conv_hi, *_ = _bisect_decreasing(f_upper, guess_hi)
    upper = np.where(upper_inf, np.inf, root_hi)

    g_lo = ac2_diff(est, var, w, alpha, refit, np.where(np.isfinite(lower), lower, 0.0), diff_provider).gamma
    g_hi = ac2_diff(est, var, w, alpha, refit, np.where(np.isfinite(upper), upper, 0.0), diff_provider).gamma
    return Limits(
        est_r,
        lower,
        upper,
        np.stack([g_lo, g_hi], axis=-1),
        lower_zero & (t1 > 0),
        upper_inf & (t1 > 0),
    )


# --------------------------------------------------------------------------
# scalar API on StratumGroupSummary bundles
# --------------------------------------------------------------------------


def _arrays(summaries: Summaries):
    est = np.array([[c.estimate for c in row] for row in summaries], dtype=float)
    var = np.array([[c.variance for c in row] for row in summaries], dtype=float)
    lo = np.array([[c.ci.lower for c in row] for row in summaries], dtype=float)
    hi = np.array([[c.ci.upper for c in row] for row in summaries], dtype=float)
    return est, var, lo, hi


def _alpha_of(summaries: Summaries, alpha: float | None) -> float:
    if alpha is not None:
        return alpha
    return 1.0 - summaries[0][0].ci.level


def _check_level(summaries: Summaries, alpha: float):
    level = summaries[0][0].ci.level
    if abs(level - (1.0 - alpha)) > 1e-12:
        raise MalformedInterval(
            f"stratum CIs are at level {level}, but alpha={alpha} was requested; "
            "re-level the one-sample CIs first"
        )


def _sigmas(summaries: Summaries, var, lo, hi, alpha, variance_source: str):
    if variance_source == "delta":
        return np.sqrt(var)
    if variance_source == "recovered":
        return np.sqrt(recovered_variance(lo, hi, alpha))
    raise ValueError(f"variance_source must be 'delta' or 'recovered', got {variance_source!r}")


def _gamma_guard(sigma, w, lo, hi):
    for g in (0, 1):
        if np.all(lo[:, g] == hi[:, g]):
            continue
        if not np.any(np.asarray(w) * sigma[:, g] > 0):
            raise AllZeroVariances(f"group {g}: every weighted stratum variance is zero")


def _interval(lo, hi, alpha) -> ConfidenceInterval:
    return ConfidenceInterval(float(lo), float(hi), 1.0 - alpha)


def _ratio_corrections(res: Limits) -> tuple[str, ...]:
    out = []
    if res.lower_clamped is not None and bool(res.lower_clamped):
        out.append("ratio_lower_set_to_0")
    if res.upper_clamped is not None and bool(res.upper_clamped):
        out.append("ratio_upper_unbounded")
    return tuple(out)


def mover_diff_unstratified(g1, g0) -> ConfidenceInterval:
    """MOVER CI for tau1 - tau0 from two ``(estimate, ConfidenceInterval)`` pairs."""
    (e1, ci1), (e0, ci0) = g1, g0
    for e, ci in ((e1, ci1), (e0, ci0)):
        if not (ci.lower <= e <= ci.upper):
            raise MalformedInterval(f"estimate {e} outside [{ci.lower}, {ci.upper}]")
    if abs(ci1.level - ci0.level) > 1e-12:
        raise MalformedInterval(f"levels differ: {ci1.level} vs {ci0.level}")
    _, lo, hi = mover_limits(e1, ci1.lower, ci1.upper, e0, ci0.lower, ci0.upper)
    return ConfidenceInterval(float(lo), float(hi), ci1.level)


def gamma_level(weights: WeightSpec, sigmas, alpha: float) -> float:
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(sigmas < 0):
        raise ValueError("sigmas must be nonnegative")
    w = np.asarray(weights.resolved)
    if not np.any(w * sigmas > 0):
        raise AllZeroVariances("all weighted sigmas are zero")
    return float(gamma_from_sigmas(w, sigmas, alpha))


def av_diff_ci(summaries: Summaries, weights: WeightSpec, phi: float = 1.0, alpha: float | None = None) -> EffectResult:
    validate_inputs(summaries, weights)
    alpha = _alpha_of(summaries, alpha)
    _check_level(summaries, alpha)
    est, _, lo, hi = _arrays(summaries)
    res = av_diff(est, lo, hi, np.asarray(weights.resolved), phi)
    return EffectResult(Method.AV, Scale.DIFFERENCE, float(res.estimate),
                        _interval(res.lower, res.upper, alpha), weights)


def ac_diff_ci(summaries: Summaries, weights: WeightSpec, phi: float = 1.0, alpha: float | None = None,
               refit: Refit | None = None, variance_source: str = "delta") -> EffectResult:
    validate_inputs(summaries, weights)
    alpha = _alpha_of(summaries, alpha)
    _check_level(summaries, alpha)
    if refit is None:
        raise RefitUnavailable("AC needs one-sample CIs at an adjusted level; no refit provider given")
    est, var, lo, hi = _arrays(summaries)
    w = np.asarray(weights.resolved)
    sigma = _sigmas(summaries, var, lo, hi, alpha, variance_source)
    _gamma_guard(sigma, w, lo, hi)
    res = ac_diff(est, sigma, w, alpha, refit, phi)
    return EffectResult(Method.AC, Scale.DIFFERENCE, float(res.estimate),
                        _interval(res.lower, res.upper, alpha), weights,
                        gamma=(float(res.gamma[0]), float(res.gamma[1])))


def ac2_diff_ci(summaries: Summaries, weights: WeightSpec, phi: float = 1.0, alpha: float | None = None,
                refit: Refit | None = None, diff_provider: DiffProvider | None = None,
                variance_source: str = "delta") -> EffectResult:
    validate_inputs(summaries, weights)
    alpha = _alpha_of(summaries, alpha)
    _check_level(summaries, alpha)
    if refit is None and diff_provider is None:
        raise RefitUnavailable("AC2 needs a refit or per-stratum difference CI provider")
    est, var, lo, hi = _arrays(summaries)
    w = np.asarray(weights.resolved)
    if variance_source == "recovered":
        var = recovered_variance(lo, hi, alpha)
    elif variance_source != "delta":
        raise ValueError(f"variance_source must be 'delta' or 'recovered', got {variance_source!r}")
    if not np.any(w * (var[:, 1] + phi**2 * var[:, 0]) > 0):
        raise AllZeroVariances("all weighted stratum-difference variances are zero")
    res = ac2_diff(est, var, w, alpha, refit, phi, diff_provider)
    return EffectResult(Method.AC2, Scale.DIFFERENCE, float(res.estimate),
                        _interval(res.lower, res.upper, alpha), weights, gamma=(float(res.gamma),))


def _ratio_precheck(est, w):
    t = w @ est
    if t[0] == 0 and t[1] == 0:
        raise ZeroDenominator("both pooled group estimates are zero; the ratio is undefined")
    if np.any(est < 0):
        raise NonpositiveEstimate("ratio intervals need nonnegative stratum estimates")
    return t


def fieller_ac_ratio(summaries: Summaries, weights: WeightSpec, alpha: float | None = None,
                     refit: Refit | None = None, variance_source: str = "delta") -> EffectResult:
    validate_inputs(summaries, weights)
    alpha = _alpha_of(summaries, alpha)
    _check_level(summaries, alpha)
    if refit is None:
        raise RefitUnavailable("AC needs one-sample CIs at an adjusted level; no refit provider given")
    est, var, lo, hi = _arrays(summaries)
    w = np.asarray(weights.resolved)
    _ratio_precheck(est, w)
    sigma = _sigmas(summaries, var, lo, hi, alpha, variance_source)
    _gamma_guard(sigma, w, lo, hi)
    res = ac_ratio(est, sigma, w, alpha, refit)
    return EffectResult(Method.AC, Scale.RATIO, float(res.estimate),
                        _interval(res.lower, res.upper, alpha), weights,
                        gamma=(float(res.gamma[0]), float(res.gamma[1])),
                        corrections=_ratio_corrections(res))


def acl_ratio_ci(summaries: Summaries, weights: WeightSpec, alpha: float | None = None,
                 refit: Refit | None = None, variance_source: str = "delta") -> EffectResult:
    validate_inputs(summaries, weights)
    alpha = _alpha_of(summaries, alpha)
    _check_level(summaries, alpha)
    if refit is None:
        raise RefitUnavailable("ACL needs one-sample CIs at an adjusted level; no refit provider given")
    est, var, lo, hi = _arrays(summaries)
    w = np.asarray(weights.resolved)
    t = w @ est
    if np.any(t <= 0):
        raise NonpositiveEstimate(f"log-ratio interval needs positive pooled estimates, got {t[1]}, {t[0]}")
    sigma = _sigmas(summaries, var, lo, hi, alpha, variance_source)
    _gamma_guard(sigma, w, lo, hi)
    res = acl_ratio(est, sigma, w, alpha, refit)
    if not np.isfinite(res.lower):
        raise NonpositiveEstimate("a pooled limit is not positive; its logarithm is undefined")
    return EffectResult(Method.ACL, Scale.RATIO, float(res.estimate),
                        _interval(res.lower, res.upper, alpha), weights,
                        gamma=(float(res.gamma[0]), float(res.gamma[1])))


def fieller_av_ratio(summaries: Summaries, weights: WeightSpec, alpha: float | None = None) -> EffectResult:
    validate_inputs(summaries, weights)
    alpha = _alpha_of(summaries, alpha)
    _check_level(summaries, alpha)
    est, _, lo, hi = _arrays(summaries)
    w = np.asarray(weights.resolved)
    _ratio_precheck(est, w)
    res = av_ratio(est, lo, hi, w)
    return EffectResult(Method.AV, Scale.RATIO, float(res.estimate),
                        _interval(res.lower, res.upper, alpha), weights,
                        corrections=_ratio_corrections(res))


def avl_ratio_ci(summaries: Summaries, weights: WeightSpec, alpha: float | None = None) -> EffectResult:
    validate_inputs(summaries, weights)
    alpha = _alpha_of(summaries, alpha)
    _check_level(summaries, alpha)
    est, _, lo, hi = _arrays(summaries)
    w = np.asarray(weights.resolved)
    t = w @ est
    if np.any(t <= 0):
        raise NonpositiveEstimate(f"log-ratio interval needs positive pooled estimates, got {t[1]}, {t[0]}")
    res = avl_ratio(est, lo, hi, w)
    return EffectResult(Method.AVL, Scale.RATIO, float(res.estimate),
                        _interval(res.lower, res.upper, alpha), weights)


def ac2_ratio_bisection(summaries: Summaries, weights: WeightSpec, alpha: float | None = None,
                        refit: Refit | None = None, diff_provider: DiffProvider | None = None) -> EffectResult:
    validate_inputs(summaries, weights)
    alpha = _alpha_of(summaries, alpha)
    _check_level(summaries, alpha)
    if refit is None:
        raise RefitUnavailable("AC2 ratio needs a refit provider (its starting value is the AC limit)")
    est, var, lo, hi = _arrays(summaries)
    w = np.asarray(weights.resolved)
    _ratio_precheck(est, w)
    if not np.any(w[:, None] * var > 0):
        raise AllZeroVariances("every weighted stratum variance is zero")
    res = ac2_ratio(est, var, w, alpha, refit, diff_provider=diff_provider)
    for name, value in (("lower", res.lower), ("upper", res.upper)):
        if np.isnan(value):
            raise NoConvergence(f"AC2 ratio {name} limit could not be bracketed or did not converge")
    return EffectResult(Method.AC2, Scale.RATIO, float(res.estimate),
                        _interval(res.lower, res.upper, alpha), weights,
                        gamma=(float(res.gamma[0]), float(res.gamma[1])),
                        corrections=_ratio_corrections(res))


def summary_from_ci(estimate: float, lower: float, upper: float, n: int,
                    variance: float | None = None, level: float = 0.95) -> StratumGroupSummary:
    """Build a cell summary; a missing variance is recovered from the CI width."""
    if variance is None:
        variance = float(recovered_variance(lower, upper, 1.0 - level))
    return StratumGroupSummary(estimate, variance, ConfidenceInterval(lower, upper, level), n)
