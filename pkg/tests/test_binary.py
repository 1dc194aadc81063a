import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm
from statsmodels.stats.proportion import proportion_confint

from stratmover.binary import (
    BinaryStratum,
    ZeroCellPolicy,
    analyze_binary,
    binary_effect,
    binary_interval,
    counts,
    dc_rd_ci,
    dc_rr_ci,
    inv_weights,
    mr_continuity,
    mr_weights,
    resolve_weights,
    unstratified_bias,
    wald_rd_ci,
    wilson_ci,
    wilson_limits,
)
from stratmover.core import Method, Scale, Scheme, WeightSpec
from stratmover.errors import Incomputable, InvariantViolation

from conftest import rounded

Z = norm.isf(0.025)


# ---------------------------------------------------------------- Wilson


def test_wilson_limits_stay_in_unit_interval_exhaustive():
    n = np.concatenate([np.full(k + 1, k) for k in range(1, 201)]).astype(float)
    x = np.concatenate([np.arange(k + 1) for k in range(1, 201)]).astype(float)
    for conf in (0.5, 0.8, 0.95, 0.999):
        lo, hi = wilson_limits(x, n, conf)
        assert np.all((0 <= lo) & (lo <= x / n) & (x / n <= hi) & (hi <= 1))
        assert np.all(lo[x == 0] == 0) and np.all(hi[x == n] == 1)


@pytest.mark.parametrize("x,n", [(0, 5), (1, 10), (5, 79), (4, 16), (50, 100), (199, 200), (7, 7)])
@pytest.mark.parametrize("level", [0.9, 0.95, 0.99])
def test_wilson_matches_statsmodels(x, n, level):
    lo, hi = proportion_confint(x, n, alpha=1 - level, method="wilson")
    ci = wilson_ci(x, n, level)
    assert (ci.lower, ci.upper) == pytest.approx((lo, hi), abs=1e-12)


def test_wilson_rejects_bad_counts():
    with pytest.raises(InvariantViolation):
        wilson_ci(5, 4)


# ---------------------------------------------------------------- weights


def test_mh_weights_bioassay(bioassay):
    w = resolve_weights(bioassay, Scheme.MH).resolved
    assert [round(v, 4) for v in w] == [0.2441, 0.2480, 0.2752, 0.2327]


@given(st.lists(st.tuples(st.integers(1, 30), st.integers(1, 30)), min_size=2, max_size=5), st.data())
def test_inv_weights_symmetric_under_label_flip(sizes, data):
    n = np.array(sizes, dtype=float)
    x = np.array([[data.draw(st.integers(1, int(a) - 1 if a > 1 else 1)) if a > 1 else 0 for a in row]
                  for row in n], dtype=float)
    w = inv_weights(x, n)
    w_flip = inv_weights(n - x, n)
    np.testing.assert_allclose(w, w_flip, rtol=1e-12)


def _eq9(x, n):
    p = x / n
    v = np.sum(p * (1 - p) / n, axis=1)
    d = p[:, 1] - p[:, 0]
    f1 = n[0].sum() / n.sum()
    D2 = (d[1] - d[0]) ** 2
    return (v[1] + f1 * D2) / (v[0] + v[1] + D2)


@settings(max_examples=200)
@given(st.lists(st.integers(1, 59), min_size=4, max_size=4), st.lists(st.integers(60, 200), min_size=4, max_size=4))
def test_mr_weights_two_strata_closed_form(xs, ns):
    x = np.array(xs, dtype=float).reshape(2, 2)
    n = np.array(ns, dtype=float).reshape(2, 2)
    w = mr_weights(x, n)
    assert w[0] == pytest.approx(_eq9(x, n), rel=1e-10)
    assert w.sum() == pytest.approx(1.0)


def test_mr_weights_equal_rates_reduce_to_inv():
    # with identical stratum differences the bias term vanishes
    x = np.array([[5, 10], [12, 24]], dtype=float)
    n = np.array([[50, 50], [120, 120]], dtype=float)
    np.testing.assert_allclose(mr_weights(x, n), inv_weights(x, n), rtol=1e-12)


def test_bioassay_estimates_per_scheme(bioassay):
    est = {s: binary_effect(bioassay, Method.WALD, Scale.DIFFERENCE, resolve_weights(bioassay, s)).estimate
           for s in (Scheme.MH, Scheme.INV, Scheme.MR)}
    assert [round(est[s], 3) for s in (Scheme.MH, Scheme.INV, Scheme.MR)] == [0.106, 0.084, 0.096]


# ---------------------------------------------------------------- MR continuity


def test_continuity_constant_values(bioassay):
    assert mr_continuity(bioassay) == pytest.approx(0.003440, abs=5e-7)
    assert mr_continuity([BinaryStratum(1, 4, 2, 4)]) == pytest.approx(0.09375, rel=1e-12)


@given(st.lists(st.tuples(st.integers(1, 100), st.integers(1, 100)), min_size=1, max_size=6))
def test_continuity_halves_when_sizes_double(sizes):
    data = [BinaryStratum(0, a, 0, b) for a, b in sizes]
    doubled = [BinaryStratum(0, 2 * a, 0, 2 * b) for a, b in sizes]
    assert mr_continuity(doubled) == pytest.approx(mr_continuity(data) / 2, rel=1e-12)


@pytest.mark.parametrize("method", [Method.WALD, Method.YS, Method.AC, Method.AC2])
def test_mr_widening_is_exactly_two_c(bioassay, method):
    x, n = counts(bioassay)
    w = resolve_weights(bioassay, Scheme.MR)
    raw = binary_interval(x, n, np.asarray(w.resolved), method, Scale.DIFFERENCE, 0.05)
    r = binary_effect(bioassay, method, Scale.DIFFERENCE, w)
    c = mr_continuity(bioassay)
    assert r.ci.width - float(raw.upper - raw.lower) == pytest.approx(2 * c, abs=1e-15)
    assert r.corrections == (f"mr_continuity:{c!r}",)


def test_mr_av_uncorrected_by_default(bioassay):
    w = resolve_weights(bioassay, Scheme.MR)
    plain = binary_effect(bioassay, Method.AV, Scale.DIFFERENCE, w)
    corrected = binary_effect(bioassay, Method.AV, Scale.DIFFERENCE, w, mr_correct_av=True)
    assert plain.corrections == ()
    assert corrected.ci.width - plain.ci.width == pytest.approx(2 * mr_continuity(bioassay))


# ---------------------------------------------------------------- comparators


def _sato_oracle(data, level=0.95):
    # Sato (1989) variance written with P_s, Q_s, W_s
    num_p = num_q = sw = swd = 0.0
    for d in data:
        a, n1, b, n0 = d.x1, d.n1, d.x0, d.n0
        N = n1 + n0
        W = n1 * n0 / N
        sw += W
        swd += W * (a / n1 - b / n0)
        num_p += (n1**2 * b - n0**2 * a + n1 * n0 * (n0 - n1) / 2) / N**2
        num_q += (a * (n0 - b) + b * (n1 - a)) / (2 * N)
    rd = swd / sw
    se = math.sqrt((rd * num_p + num_q) / sw**2)
    z = norm.isf((1 - level) / 2)
    return rd - z * se, rd + z * se


def _greenland_robins_oracle(data, level=0.95):
    r = s = pr = 0.0
    for d in data:
        a, n1, b, n0 = d.x1, d.n1, d.x0, d.n0
        N = n1 + n0
        r += a * n0 / N
        s += b * n1 / N
        pr += (n1 * n0 * (a + b) - a * b * N) / N**2
    rr = r / s
    se = math.sqrt(pr / (r * s))
    z = norm.isf((1 - level) / 2)
    return rr * math.exp(-z * se), rr * math.exp(z * se)


def _random_tables(seed, k=50):
    rng = np.random.default_rng(seed)
    for _ in range(k):
        S = rng.integers(1, 6)
        rows = []
        for _ in range(S):
            n0, n1 = rng.integers(2, 60, 2)
            rows.append(BinaryStratum(int(rng.integers(1, n0)), int(n0), int(rng.integers(1, n1)), int(n1)))
        yield rows


def test_dc_rd_matches_sato():
    for data in _random_tables(1):
        ci = dc_rd_ci(data)
        assert (ci.ci.lower, ci.ci.upper) == pytest.approx(_sato_oracle(data), abs=1e-12)


def test_dc_rr_matches_greenland_robins():
    for data in _random_tables(2):
        ci = dc_rr_ci(data)
        assert (ci.ci.lower, ci.ci.upper) == pytest.approx(_greenland_robins_oracle(data), rel=1e-12)


def test_wald_rd_closed_form(bioassay):
    x, n = counts(bioassay)
    p = x / n
    w = np.asarray(resolve_weights(bioassay, Scheme.INV).resolved)
    d = w @ (p[:, 1] - p[:, 0])
    se = math.sqrt(np.sum(w**2 * np.sum(p * (1 - p) / n, axis=1)))
    r = wald_rd_ci(bioassay, resolve_weights(bioassay, Scheme.INV))
    assert (r.ci.lower, r.ci.upper) == pytest.approx((d - Z * se, d + Z * se), abs=1e-14)


def test_dc_and_wald_agree_in_large_strata():
    n = 10**6
    data = [BinaryStratum(int(0.2 * n), n, int(0.3 * n), n), BinaryStratum(int(0.5 * n), n, int(0.55 * n), n)]
    dc = dc_rd_ci(data).ci
    wald = wald_rd_ci(data, resolve_weights(data, Scheme.MH)).ci
    assert dc.lower == pytest.approx(wald.lower, abs=1e-3)
    assert dc.upper == pytest.approx(wald.upper, abs=1e-3)


def test_table_cells_mh(bioassay):
    a = analyze_binary(bioassay, Scheme.MH)
    assert rounded(a.get(Method.DC).ci) == (0.012, 0.200)
    assert rounded(a.get(Method.WALD).ci) == (0.013, 0.198)
    assert rounded(a.get(Method.YS).ci) == (0.027, 0.217)
    assert rounded(a.get(Method.DC, Scale.RATIO).ci) == (1.366, 5.234)
    assert rounded(a.get(Method.ASY, Scale.RATIO).ci) == (1.369, 5.222)


def test_mh_rr_equals_crude_when_allocation_constant():
    for ratio in (1, 2, 3):
        for n0s in itertools.product((3, 5), repeat=2):
            for xs in itertools.product(range(0, 4), repeat=4):
                x00, x01, x10, x11 = xs
                n1s = [ratio * k for k in n0s]
                if x00 > n0s[0] or x10 > n0s[1] or x01 > n1s[0] or x11 > n1s[1]:
                    continue
                if x00 + x10 == 0:
                    continue
                data = [BinaryStratum(x00, n0s[0], x01, n1s[0]), BinaryStratum(x10, n0s[1], x11, n1s[1])]
                x, n = counts(data)
                w = np.asarray(resolve_weights(data, Scheme.MH).resolved)
                mh = (w @ (x[:, 1] / n[:, 1])) / (w @ (x[:, 0] / n[:, 0]))
                crude = (x[:, 1].sum() / n[:, 1].sum()) / (x[:, 0].sum() / n[:, 0].sum())
                assert mh == pytest.approx(crude, rel=1e-12)


# ---------------------------------------------------------------- bias of the crude estimate


def _crude_bias_oracle(p10, p20, n10, n20, r1, r2, delta):
    n11, n21 = r1 * n10, r2 * n20
    treated = (n11 * (p10 + delta) + n21 * (p20 + delta)) / (n11 + n21)
    control = (n10 * p10 + n20 * p20) / (n10 + n20)
    return treated - control - delta


def test_bias_direct_evaluation():
    b = unstratified_bias(0.1, 0.5, 80, 20, 0.25, 4)
    assert b == pytest.approx(_crude_bias_oracle(0.1, 0.5, 80, 20, 0.25, 4, 0.0), rel=1e-12)
    assert b == pytest.approx(0.24, rel=1e-12)


@given(st.floats(0, 0.5), st.floats(0, 0.5), st.integers(1, 500), st.integers(1, 500),
       st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-0.4, 0.4))
def test_bias_formula_against_expectation(p10, p20, n10, n20, r1, r2, delta):
    got = unstratified_bias(p10, p20, n10, n20, r1, r2, delta)
    assert got == pytest.approx(_crude_bias_oracle(p10, p20, n10, n20, r1, r2, delta), abs=1e-12)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 500), st.integers(1, 500), st.floats(0.1, 10))
def test_bias_zero_when_rates_or_ratios_match(p, q, n10, n20, r):
    assert unstratified_bias(p, p, n10, n20, r, 2 * r) == 0
    assert unstratified_bias(p, q, n10, n20, r, r) == 0


# ---------------------------------------------------------------- errors and policies


def test_dc_requires_mh(bioassay):
    with pytest.raises(InvariantViolation):
        binary_effect(bioassay, Method.DC, Scale.DIFFERENCE, resolve_weights(bioassay, Scheme.INV))


def test_mr_ratio_not_offered(bioassay):
    with pytest.raises(InvariantViolation):
        binary_effect(bioassay, Method.AV, Scale.RATIO, resolve_weights(bioassay, Scheme.MR))
    assert all(r.scale is Scale.DIFFERENCE for r in analyze_binary(bioassay, Scheme.MR).results)


def test_no_events_anywhere_is_incomputable():
    data = [BinaryStratum(0, 10, 0, 10), BinaryStratum(0, 12, 0, 9)]
    a = analyze_binary(data, Scheme.MH)
    failed = {(m, s) for m, s, _ in a.failures}
    assert (Method.DC, Scale.DIFFERENCE) in failed
    assert (Method.AV, Scale.RATIO) in failed
    with pytest.raises(Incomputable):
        binary_effect(data, Method.AC, Scale.DIFFERENCE, resolve_weights(data, Scheme.MH))


def test_half_event_changes_weights_not_estimates():
    data = [BinaryStratum(0, 20, 3, 20), BinaryStratum(4, 25, 9, 25)]
    plain = resolve_weights(data, Scheme.INV, ZeroCellPolicy.NONE)
    half = resolve_weights(data, Scheme.INV, ZeroCellPolicy.HALF_EVENT)
    assert plain.resolved != half.resolved
    x, n = counts(data)
    r = binary_effect(data, Method.WALD, Scale.DIFFERENCE, half, policy=ZeroCellPolicy.HALF_EVENT)
    w = np.asarray(half.resolved)
    assert r.estimate == pytest.approx(w @ (x[:, 1] / n[:, 1] - x[:, 0] / n[:, 0]))


def test_half_event_rescues_gamma_methods():
    data = [BinaryStratum(0, 20, 3, 20), BinaryStratum(0, 25, 9, 25)]
    w = resolve_weights(data, Scheme.MH)
    with pytest.raises(Incomputable):
        binary_effect(data, Method.AC, Scale.DIFFERENCE, w)
    r = binary_effect(data, Method.AC, Scale.DIFFERENCE, w, policy=ZeroCellPolicy.HALF_EVENT)
    assert r.ci.contains(r.estimate)


def test_fixed_weights(bioassay):
    w = resolve_weights(bioassay, Scheme.FIXED, fixed=[1, 1, 1, 1])
    assert w.resolved == (0.25, 0.25, 0.25, 0.25)
    with pytest.raises(InvariantViolation):
        resolve_weights(bioassay, Scheme.FIXED, fixed=[1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(20, 40), st.integers(0, 20), st.integers(20, 40)),
                min_size=1, max_size=4))
def test_every_emitted_result_satisfies_invariants(rows):
    data = [BinaryStratum(a, b, c, d) for a, b, c, d in rows]
    for scheme in (Scheme.MH, Scheme.INV, Scheme.MR):
        try:
            a = analyze_binary(data, scheme, policy=ZeroCellPolicy.HALF_EVENT)
        except Incomputable:
            continue
        for r in a.results:
            assert r.ci.lower - 1e-9 <= r.estimate <= r.ci.upper + 1e-9
            assert abs(sum(r.weights.resolved) - 1) < 1e-12
            if r.gamma is not None:
                assert all(g >= 0.05 for g in r.gamma)
