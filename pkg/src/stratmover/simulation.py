"""Monte Carlo coverage and type-I-error studies for stratified binary data.

Randomness is organised in fixed blocks of ``BLOCK`` replicates. Block ``b``
draws from its own stream seeded by ``(seed, b)``, so a replicate's data
depend only on the seed and its index. Workers process whole blocks and
the per-block tallies are integers, so reports are bit-identical for any
worker count.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .binary import (
    ZeroCellPolicy,
    batch_weights,
    binary_interval,
    mh_weights,
    mr_corrected,
    mr_correction,
)
from .core import Method, Scale, Scheme
from .errors import InvariantViolation, RegenerationLimit, UnknownExample

BLOCK = 1024
MAX_ATTEMPTS = 10**6
WORKERS_ENV = "STRATMOVER_WORKERS"


class Metric(str, Enum):
    RD = "RD"
    RR = "RR"

    @property
    def scale(self) -> Scale:
        return Scale.DIFFERENCE if self is Metric.RD else Scale.RATIO


RD_METHODS = (Method.DC, Method.WALD, Method.AV, Method.YS, Method.AC, Method.AC2)
RR_METHODS = (Method.DC, Method.ASY, Method.AV, Method.AVL, Method.AC, Method.AC2, Method.ACL)


@dataclass(frozen=True)
class Scenario:
    rates0: tuple[float, ...]
    effect: float | tuple[float, ...]
    sizes: tuple[tuple[int, int], ...]  # (n_s0, n_s1) per stratum
    metric: Metric = Metric.RD
    scheme: Scheme = Scheme.MH
    methods: tuple[Method, ...] = (Method.WALD, Method.AV, Method.AC, Method.AC2)
    level: float = 0.95
    replicates: int = 100_000
    seed: int = 0
    policy: ZeroCellPolicy = ZeroCellPolicy.HALF_EVENT
    scenario_id: str = ""
    mr_correct_av: bool = False

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "policy", ZeroCellPolicy(self.policy))
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "rates0", tuple(float(p) for p in self.rates0))
        object.__setattr__(self, "sizes", tuple((int(a), int(b)) for a, b in self.sizes))
        if isinstance(self.effect, (list, tuple)):
            object.__setattr__(self, "effect", tuple(float(e) for e in self.effect))
        else:
            object.__setattr__(self, "effect", float(self.effect))
        if len(self.rates0) != len(self.sizes):
            raise InvariantViolation("sizes", "one (n0, n1) pair per stratum is required")
        if isinstance(self.effect, tuple) and len(self.effect) != len(self.rates0):
            raise InvariantViolation("effect", "per-stratum effects must match the stratum count")
        if not 0 < self.level <= 1:
            raise InvariantViolation("level", f"must lie in (0, 1], got {self.level}")
        if self.replicates < 1:
            raise InvariantViolation("replicates", "must be positive")
        if self.scheme is Scheme.FIXED:
            raise InvariantViolation("scheme", "simulations use MH, INV or MR weights")
        if self.scheme is Scheme.MR and self.metric is Metric.RR:
            raise InvariantViolation("scheme", "MR weights are defined for the risk difference only")
        p1 = self.rates1
        if any(not 0.0 <= p <= 1.0 for p in self.rates0 + p1):
            raise InvariantViolation("effect", f"implied rates {p1} leave [0, 1]")
        for m in self.methods:
            if m not in (RD_METHODS if self.metric is Metric.RD else RR_METHODS):
                raise InvariantViolation("methods", f"{m.value} is not available for {self.metric.value}")
            if m is Method.DC and self.scheme is not Scheme.MH:
                raise InvariantViolation("methods", "DC requires MH weights")

    @property
    def effects(self) -> tuple[float, ...]:
        if isinstance(self.effect, tuple):
            return self.effect
        return (self.effect,) * len(self.rates0)

    @property
    def rates1(self) -> tuple[float, ...]:
        if self.metric is Metric.RD:
            return tuple(p + e for p, e in zip(self.rates0, self.effects))
        return tuple(p * e for p, e in zip(self.rates0, self.effects))

    @property
    def constant_effect(self) -> bool:
        return len(set(self.effects)) == 1

    @property
    def truth(self) -> float:
        """Coverage target: the common effect, else the MH-pooled effect."""
        if self.constant_effect:
            return self.effects[0]
        w = mh_weights(np.array(self.sizes, dtype=float))
        p0, p1 = np.array(self.rates0), np.array(self.rates1)
        if self.metric is Metric.RD:
            return float(np.sum(w * (p1 - p0)))
        return float(np.sum(w * p1) / np.sum(w * p0))

    @property
    def null_value(self) -> float:
        return 0.0 if self.metric is Metric.RD else 1.0

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        n = np.array(self.sizes, dtype=float)
        p = np.stack([np.array(self.rates0), np.array(self.rates1)], axis=-1)
        return n, p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metric"] = self.metric.value
        d["scheme"] = self.scheme.value
        d["policy"] = self.policy.value
        d["methods"] = [m.value for m in self.methods]
        d["sizes"] = [list(s) for s in self.sizes]
        d["rates0"] = list(self.rates0)
        d["effect"] = list(self.effect) if isinstance(self.effect, tuple) else self.effect
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if "methods" in d:
            d["methods"] = tuple(Method.parse(m) for m in d["methods"])
        if "scheme" in d:
            d["scheme"] = Scheme.parse(d["scheme"])
        if "metric" in d:
            d["metric"] = Metric(str(d["metric"]).upper())
        if "policy" in d:
            d["policy"] = ZeroCellPolicy(d["policy"])
        for key in ("rates0", "sizes"):
            if key in d:
                d[key] = tuple(tuple(v) if isinstance(v, list) else v for v in d[key])
        return cls(**d)


# --------------------------------------------------------------------------
# data generation
# --------------------------------------------------------------------------


def _needs_regeneration(x, metric: Metric):
    if metric is Metric.RD:
        return x.sum(axis=(-1, -2)) == 0
    return np.any(x.sum(axis=-2) == 0, axis=-1)


def acceptance_probability(scenario: Scenario) -> float:
    """Probability that a single draw satisfies the regeneration condition."""
    n, p = scenario.cells()
    none = (1.0 - p) ** n  # P(x_sg = 0)
    if scenario.metric is Metric.RD:
        return 1.0 - float(np.prod(none))
    g0, g1 = float(np.prod(none[:, 0])), float(np.prod(none[:, 1]))
    return 1.0 - g0 - g1 + g0 * g1


def generate_block(scenario: Scenario, block: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts for replicates ``block*BLOCK ... block*BLOCK + BLOCK - 1``.

    Returns ``(x, regenerations)`` with ``x`` of shape (BLOCK, S, 2).
    """
    if acceptance_probability(scenario) <= 0.0:
        raise RegenerationLimit("the regeneration condition can never be met for this scenario")
    n, p = scenario.cells()
    rng = np.random.default_rng([scenario.seed, block])
    x = rng.binomial(n.astype(np.int64), p, size=(BLOCK,) + n.shape)
    regen = np.zeros(BLOCK, dtype=np.int64)
    bad = _needs_regeneration(x, scenario.metric)
    while bad.any():
        regen[bad] += 1
        if regen.max() >= MAX_ATTEMPTS:
            raise RegenerationLimit(f"more than {MAX_ATTEMPTS} regeneration attempts")
        x[bad] = rng.binomial(n.astype(np.int64), p, size=(int(bad.sum()),) + n.shape)
        bad = _needs_regeneration(x, scenario.metric)
    return x, regen


def generate_dataset(scenario: Scenario, replicate_index: int):
    """Counts of one replicate as a list of BinaryStratum."""
    from .binary import BinaryStratum

    x, _ = generate_block(scenario, replicate_index // BLOCK)
    row = x[replicate_index % BLOCK]
    return [BinaryStratum(int(row[s, 0]), n0, int(row[s, 1]), n1)
            for s, (n0, n1) in enumerate(scenario.sizes)]


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate_block(scenario: Scenario, x) -> dict[Method, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-method (estimate, lower, upper) for a batch of count arrays."""
    n = np.broadcast_to(np.array(scenario.sizes, dtype=float), x.shape)
    x = np.asarray(x, dtype=float)
    alpha = 1.0 - scenario.level
    scale = scenario.metric.scale
    w = batch_weights(x, n, scenario.scheme, scenario.policy)
    c = mr_correction(n) if scenario.scheme is Scheme.MR else None
    out = {}
    for method in scenario.methods:
        if alpha <= 0:
            # a level-1 interval is the whole parameter space
            est = np.zeros(x.shape[0])
            out[method] = (est, np.full_like(est, -np.inf), np.full_like(est, np.inf))
            continue
        res = binary_interval(x, n, w, method, scale, alpha, scenario.policy)
        lo, hi = res.lower, res.upper
        if c is not None and scale is Scale.DIFFERENCE and mr_corrected(method, scenario.mr_correct_av):
            lo, hi = lo - c, hi + c
        out[method] = (res.estimate, lo, hi)
    return out


@dataclass
class BlockTally:
    hits: dict[Method, int]
    computable: dict[Method, int]
    regenerations: int
    replicates: int

    def __add__(self, other: "BlockTally") -> "BlockTally":
        return BlockTally(
            {m: self.hits[m] + other.hits[m] for m in self.hits},
            {m: self.computable[m] + other.computable[m] for m in self.computable},
            self.regenerations + other.regenerations,
            self.replicates + other.replicates,
        )


def _tally_block(args) -> BlockTally:
    scenario, block, kind = args
    x, regen = generate_block(scenario, block)
    take = min(BLOCK, scenario.replicates - block * BLOCK)
    x, regen = x[:take], regen[:take]
    limits = evaluate_block(scenario, x)
    hits, comp = {}, {}
    for method, (est, lo, hi) in limits.items():
        ok = np.isfinite(est) & ~np.isnan(lo) & ~np.isnan(hi)
        if kind == "coverage":
            event = (lo <= scenario.truth) & (scenario.truth <= hi)
        else:
            event = (lo > scenario.null_value) | (hi < scenario.null_value)
        hits[method] = int(np.sum(event & ok))
        comp[method] = int(np.sum(ok))
    return BlockTally(hits, comp, int(regen.sum()), take)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class MethodReport:
    method: Method
    rate: float
    mcse: float
    replicates: int  # replicates with a computable interval
    excluded: int

    @property
    def bracket(self) -> tuple[float, float]:
        return self.rate - 3 * self.mcse, self.rate + 3 * self.mcse


@dataclass(frozen=True)
class SimReport:
    scenario_id: str
    metric: Metric
    kind: str  # "coverage" or "rejection"
    methods: dict[Method, MethodReport]
    replicates: int
    regenerations: int

    def rows(self) -> list[dict]:
        return [
            {
                "scenario_id": self.scenario_id,
                "method": m.value,
                "metric": self.metric.value,
                "rate": r.rate,
                "mcse": r.mcse,
                "replicates": r.replicates,
                "excluded": r.excluded,
            }
            for m, r in self.methods.items()
        ]


def mcse(rate: float, replicates: int) -> float:
    return math.sqrt(rate * (1.0 - rate) / replicates) if replicates > 0 else float("nan")


def _run(scenario: Scenario, kind: str, workers: int | None) -> SimReport:
    workers = workers or default_workers()
    blocks = range(math.ceil(scenario.replicates / BLOCK))
    jobs = [(scenario, b, kind) for b in blocks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            tallies = list(pool.map(_tally_block, jobs))
    else:
        tallies = [_tally_block(j) for j in jobs]
    total = tallies[0]
    for t in tallies[1:]:
        total = total + t
    reports = {}
    for m in scenario.methods:
        k = total.computable[m]
        rate = total.hits[m] / k if k else float("nan")
        reports[m] = MethodReport(m, rate, mcse(rate, k), k, total.replicates - k)
    return SimReport(scenario.scenario_id, scenario.metric, kind, reports,
                     total.replicates, total.regenerations)


def coverage_study(scenario: Scenario, workers: int | None = None) -> SimReport:
    """Fraction of replicates whose interval covers ``scenario.truth``."""
    return _run(scenario, "coverage", workers)


def test_study(scenario: Scenario, workers: int | None = None) -> SimReport:
    """Fraction of replicates whose interval excludes the null value (0 or 1)."""
    return _run(scenario, "rejection", workers)


test_study.__test__ = False  # keep pytest from collecting it


def weight_study(scenario: Scenario) -> tuple[float, float]:
    """Mean and SD of the first-stratum weight across replicates."""
    total, total_sq, count = 0.0, 0.0, 0
    for b in range(math.ceil(scenario.replicates / BLOCK)):
        x, _ = generate_block(scenario, b)
        x = x[: min(BLOCK, scenario.replicates - b * BLOCK)].astype(float)
        n = np.broadcast_to(np.array(scenario.sizes, dtype=float), x.shape)
        w1 = batch_weights(x, n, scenario.scheme, scenario.policy)[:, 0]
        total += float(w1.sum())
        total_sq += float((w1**2).sum())
        count += w1.size
    mean = total / count
    return mean, math.sqrt(max(total_sq / count - mean**2, 0.0))


# --------------------------------------------------------------------------
# design grids
# --------------------------------------------------------------------------

EX3_LAYOUTS = {"balanced": ((24, 24), (16, 16)), "unbalanced": ((12, 36), (8, 24))}
EX4_LAYOUTS = {"balanced": ((20, 20), (16, 16), (12, 12)), "unbalanced": ((10, 30), (8, 24), (6, 18))}
EX6_SIZES = (50, 100, 200, 500, 10000)
EX6_POWER_SIZES = (50, 100, 200, 500)


def _scale_layout(layout, factor):
    return tuple((a * factor, b * factor) for a, b in layout)


def _homogeneous(example: int, ks, layouts, replicates, seed):
    out = []
    specs = [
        (Metric.RD, Scheme.MH, RD_METHODS, (0.0, 0.3)),
        (Metric.RD, Scheme.MR, tuple(m for m in RD_METHODS if m is not Method.DC), (0.0, 0.3)),
        (Metric.RR, Scheme.MH, RR_METHODS, (1.0, 1.5)),
    ]
    for metric, scheme, methods, effects in specs:
        for layout_name, layout in layouts.items():
            for combo in itertools.product(ks, repeat=len(layout)):
                for eff in effects:
                    rates = tuple(round(0.12 * k, 10) for k in combo)
                    sid = f"ex{example}-{metric.value}-{scheme.value}-{layout_name}-k{''.join(map(str, combo))}-e{eff:g}"
                    out.append(Scenario(rates, eff, layout, metric, scheme, methods,
                                        replicates=replicates, seed=seed, scenario_id=sid))
    return out


def scenario_grid(example: int, replicates: int = 100_000, seed: int = 0) -> list[Scenario]:
    """The factorial simulation designs of examples 3 to 6."""
    if example == 3:
        return _homogeneous(3, range(1, 6), EX3_LAYOUTS, replicates, seed)
    if example == 4:
        return _homogeneous(4, (1, 3, 5), EX4_LAYOUTS, replicates, seed)
    if example == 5:
        out = []
        specs = [
            (Metric.RD, Scheme.MH, tuple(m for m in RD_METHODS), (0.0, 0.3)),
            (Metric.RD, Scheme.MR, tuple(m for m in RD_METHODS if m is not Method.DC), (0.0, 0.3)),
            (Metric.RR, Scheme.MH, RR_METHODS, (1.0, 1.5)),
        ]
        for metric, scheme, methods, effect in specs:
            for factor in (1, 100):
                for layout_name, layout in EX3_LAYOUTS.items():
                    for k1, k2 in itertools.product(range(1, 6), repeat=2):
                        rates = (round(0.12 * k1, 10), round(0.12 * k2, 10))
                        sid = f"ex5-{metric.value}-{scheme.value}-n{80 * factor}-{layout_name}-k{k1}{k2}"
                        out.append(Scenario(rates, effect, _scale_layout(layout, factor), metric, scheme,
                                            methods, replicates=replicates, seed=seed, scenario_id=sid))
        return out
    if example == 6:
        out = []
        methods = (Method.WALD, Method.YS, Method.AV, Method.AC, Method.AC2)
        for scheme in (Scheme.MH, Scheme.INV, Scheme.MR):
            for rd, sizes in ((0.0, EX6_SIZES), (0.05, EX6_POWER_SIZES)):
                for nsg in sizes:
                    sid = f"ex6-{scheme.value}-n{nsg}-rd{rd:g}"
                    out.append(Scenario((0.1, 0.6), rd, ((nsg, nsg), (nsg, nsg)), Metric.RD, scheme,
                                        methods, replicates=replicates, seed=seed, scenario_id=sid))
        return out
    raise UnknownExample(f"no simulation design for example {example!r}; choose 3, 4, 5 or 6")


def with_replicates(scenario: Scenario, replicates: int, seed: int | None = None) -> Scenario:
    return replace(scenario, replicates=replicates, seed=scenario.seed if seed is None else seed)


# --------------------------------------------------------------------------
# exact enumeration
# --------------------------------------------------------------------------

MAX_OUTCOMES = 2_000_000


def exact_coverage(scenario: Scenario) -> dict[Method, float]:
    """Exact conditional coverage by enumerating every outcome.

    Outcomes failing the regeneration condition are dropped and the
    remaining probabilities renormalised; within those, outcomes where a
    method is incomputable are excluded from that method's denominator,
    matching the Monte Carlo estimator.
    """
    from scipy.stats import binom

    n, p = scenario.cells()
    ni = n.astype(int)
    axes = [np.arange(k + 1) for k in ni.ravel()]
    total = math.prod(len(a) for a in axes)
    if total > MAX_OUTCOMES:
        raise InvariantViolation("sizes", f"{total} outcomes is too many to enumerate")
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, *n.shape)
    prob = np.prod(binom.pmf(grid, ni, p), axis=(-1, -2))
    keep = ~_needs_regeneration(grid, scenario.metric)
    grid, prob = grid[keep], prob[keep]
    out = {}
    for method, (est, lo, hi) in evaluate_block(scenario, grid).items():
        ok = np.isfinite(est) & ~np.isnan(lo) & ~np.isnan(hi)
        covered = ok & (lo <= scenario.truth) & (scenario.truth <= hi)
        out[method] = float(prob[covered].sum() / prob[ok].sum())
    return out
