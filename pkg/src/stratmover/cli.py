"""Command-line entry point: ``stratmover analyze-binary | analyze-survival | simulate``."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from . import io as sio
from .binary import ZeroCellPolicy, analyze_binary
from .core import DEFAULT_LEVEL, Method, Scale, Scheme
from .errors import InputError, StratMoverError
from .simulation import WORKERS_ENV, coverage_study, scenario_grid, test_study, with_replicates
from .survival import analyze_survival, make_summaries

EXIT_OK, EXIT_INPUT, EXIT_INCOMPUTABLE = 0, 2, 3

SCALES = {
    "difference": (Scale.DIFFERENCE,),
    "ratio": (Scale.RATIO,),
    "both": (Scale.DIFFERENCE, Scale.RATIO),
}


def _methods(text: str) -> tuple[Method, ...] | None:
    if text.strip().lower() == "all":
        return None
    return tuple(Method.parse(t) for t in text.split(",") if t.strip())


def _weights(text: str | None) -> tuple[float, ...] | None:
    if text is None:
        return None
    return tuple(float(t) for t in text.split(","))


def _level(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {value}")
    return value


def _common(p: argparse.ArgumentParser, schemes: Sequence[str]):
    p.add_argument("--scheme", default="mh", choices=schemes, type=str.lower,
                   help="weighting scheme (default: mh)")
    p.add_argument("--weights", help="comma-separated weights for --scheme fixed")
    p.add_argument("--methods", default="all", help="'all' or a comma-separated list, e.g. av,ac,ac2")
    p.add_argument("--level", type=_level, default=DEFAULT_LEVEL, help="confidence level (default: 0.95)")
    p.add_argument("--scale", choices=sorted(SCALES), default="both",
                   help="difference, ratio or both (default: both)")
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--output", help="write the report here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratmover",
                                     description="Stratified MOVER confidence intervals and simulations.")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("analyze-binary", help="stratified risk difference / risk ratio intervals")
    b.add_argument("--input", required=True,
                   help="CSV with header stratum,group,events,total (bundled: bioassay.csv)")
    _common(b, ("mh", "inv", "mr", "fixed"))
    b.add_argument("--zero-cell", choices=[p.value for p in ZeroCellPolicy], default="none",
                   help="zero-cell handling for weights and variances (default: none)")
    b.add_argument("--mr-correct-av", action="store_true",
                   help="also apply the MR continuity correction to AV")

    s = sub.add_parser("analyze-survival", help="stratified milestone survival or RMST intervals")
    s.add_argument("--input", help="CSV with header time,event,group,stratum")
    what = s.add_mutually_exclusive_group()
    what.add_argument("--milestone", type=float, help="milestone time t for KM survival")
    what.add_argument("--horizon", type=float, help="RMST truncation horizon L")
    s.add_argument("--external-ci", help="JSON file of externally computed one-sample CIs")
    _common(s, ("mh", "inv", "fixed"))

    m = sub.add_parser("simulate", help="coverage / rejection-rate simulation studies")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--example", type=int, help="built-in design: 3, 4, 5 or 6")
    src.add_argument("--scenario", help="JSON scenario file")
    m.add_argument("--replicates", type=int, help="replicates per scenario (default: 100000)")
    m.add_argument("--seed", type=int, help="64-bit seed (default: 0)")
    m.add_argument("--workers", type=int, default=None,
                   help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    m.add_argument("--study", choices=("coverage", "rejection"),
                   help="default: rejection for example 6, coverage otherwise")
    m.add_argument("--filter", help="only scenarios whose id contains this text")
    m.add_argument("--format", choices=("table", "csv", "json"), default="csv")
    m.add_argument("--output")
    return parser


def _emit(text: str, output: str | None):
    if output:
        with open(output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _report(args, analysis, title: str, extra: dict) -> int:
    if args.format == "table":
        text = sio.results_table(analysis.results, analysis.failures, title)
    elif args.format == "csv":
        text = sio.results_csv(analysis.results)
    else:
        text = sio.results_json(analysis.results, analysis.failures, extra)
    _emit(text, args.output)
    for method, scale, msg in analysis.failures:
        print(f"stratmover: {method.value}/{scale.value} incomputable: {msg}", file=sys.stderr)
    return EXIT_INCOMPUTABLE if analysis.failures else EXIT_OK


def _analyze_binary(args) -> int:
    labels, data = sio.load_binary(args.input)
    analysis = analyze_binary(
        data, Scheme.parse(args.scheme), _methods(args.methods), args.level,
        ZeroCellPolicy(args.zero_cell), SCALES[args.scale], _weights(args.weights), args.mr_correct_av,
    )
    title = f"{len(data)} strata ({', '.join(labels)}), level {args.level:g}"
    return _report(args, analysis, title, {"strata": labels, "level": args.level})


def _analyze_survival(args) -> int:
    records = sio.parse_survival_csv(args.input) if args.input else None
    external, meta = sio.load_external_cis(args.external_ci) if args.external_ci else (None, {})
    milestone, horizon = args.milestone, args.horizon
    if milestone is None and horizon is None:
        if meta.get("measure") == "rmst" and "horizon" in meta:
            horizon = float(meta["horizon"])
        elif meta.get("measure") == "milestone" and "milestone" in meta:
            milestone = float(meta["milestone"])
        else:
            raise InputError("give --milestone or --horizon")
    if records is None and external is None:
        raise InputError("give --input and/or --external-ci")
    summ = make_summaries(records, milestone_time=milestone, horizon=horizon,
                          external=external, level=args.level)
    analysis = analyze_survival(summ, Scheme.parse(args.scheme), _methods(args.methods),
                                SCALES[args.scale], _weights(args.weights))
    what = f"milestone survival at t={milestone:g}" if milestone is not None else f"RMST to L={horizon:g}"
    title = f"{what}; strata {', '.join(summ.strata)}; one-sample CIs: {summ.source}"
    return _report(args, analysis, title, {"strata": summ.strata, "measure": summ.measure,
                                           "source": summ.source})


def _simulate(args) -> int:
    if args.replicates is not None and args.replicates < 1:
        raise InputError("--replicates must be positive")
    if args.example is not None:
        scenarios = scenario_grid(args.example, args.replicates or 100_000, args.seed or 0)
    else:
        scenarios = [with_replicates(s, args.replicates or s.replicates, args.seed)
                     for s in sio.load_scenarios(args.scenario)]
    if args.filter:
        scenarios = [s for s in scenarios if args.filter in s.scenario_id]
    study = args.study or ("rejection" if args.example == 6 else "coverage")
    run = test_study if study == "rejection" else coverage_study
    reports = [run(s, workers=args.workers) for s in scenarios]
    if args.format == "csv":
        text = sio.sim_csv(reports)
    elif args.format == "table":
        text = sio.sim_table(reports)
    else:
        text = sio.sim_json(reports, scenarios)
    _emit(text, args.output)
    return EXIT_OK


COMMANDS = {
    "analyze-binary": _analyze_binary,
    "analyze-survival": _analyze_survival,
    "simulate": _simulate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (StratMoverError, OSError, ValueError) as exc:
        print(f"stratmover: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
