"""File formats: binary and survival CSVs, JSON inputs, and report emitters."""

from __future__ import annotations

import csv
import io
import json
import math
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .binary import BinaryStratum
from .core import EffectResult, Method, Scale
from .errors import InputError, MissingCell, ParseError
from .simulation import Scenario, SimReport
from .survival import ExternalCI, SurvivalRecord

BINARY_HEADER = ("stratum", "group", "events", "total")
SURVIVAL_HEADER = ("time", "event", "group", "stratum")
SIM_COLUMNS = ("scenario_id", "method", "metric", "rate", "mcse", "replicates", "excluded")
RESULT_COLUMNS = ("scale", "method", "scheme", "estimate", "lower", "upper", "level",
                  "gamma", "weights", "corrections")


def bundled(name: str) -> Path:
    """Path of a data file shipped with the package."""
    return Path(str(resources.files("stratmover") / "data" / name))


def resolve_input(path: str | Path) -> Path:
    """The path itself if it exists, else a bundled file of the same name."""
    p = Path(path)
    if p.exists():
        return p
    candidate = bundled(p.name)
    if candidate.exists():
        return candidate
    raise InputError(f"input file {str(path)!r} not found")


def _read_text(source) -> str:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        try:
            return resolve_input(source).read_text()
        except OSError as exc:
            raise InputError(f"cannot read {source}: {exc.strerror}") from None
    return str(source)


def _rows(text: str, header: Sequence[str]):
    lines = [(i, line) for i, line in enumerate(text.splitlines(), start=1) if line.strip()]
    if not lines:
        raise ParseError("file is empty", 1)
    first_no, first = lines[0]
    got = tuple(h.strip().lower() for h in next(csv.reader([first])))
    if got != tuple(header):
        raise ParseError(f"expected header {','.join(header)}, got {first.strip()}", first_no)
    for no, line in lines[1:]:
        cells = [c.strip() for c in next(csv.reader([line]))]
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(cells)}", no)
        yield no, dict(zip(header, cells))


def _int(value: str, name: str, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{name} must be an integer, got {value!r}", line) from None


def _group(value: str, line: int) -> int:
    g = _int(value, "group", line)
    if g not in (0, 1):
        raise ParseError(f"group must be 0 or 1, got {g}", line)
    return g


def load_binary(source) -> tuple[list[str], list[BinaryStratum]]:
    """Stratum labels (first-appearance order) and counts from a binary CSV."""
    cells: dict[str, dict[int, tuple[int, int, int]]] = {}
    for no, row in _rows(_read_text(source), BINARY_HEADER):
        label = row["stratum"]
        if not label:
            raise ParseError("stratum label is empty", no)
        g = _group(row["group"], no)
        x = _int(row["events"], "events", no)
        n = _int(row["total"], "total", no)
        if n < 1:
            raise ParseError(f"total must be positive, got {n}", no)
        if not 0 <= x <= n:
            raise ParseError(f"events {x} outside [0, {n}]", no)
        slot = cells.setdefault(label, {})
        if g in slot:
            raise ParseError(f"stratum {label!r} group {g} repeats line {slot[g][2]}", no)
        slot[g] = (x, n, no)
    if not cells:
        raise ParseError("no data rows", 2)
    data = []
    for label, slot in cells.items():
        for g in (0, 1):
            if g not in slot:
                raise MissingCell(f"stratum {label!r} has no group {g} row", slot[1 - g][2])
        data.append(BinaryStratum(slot[0][0], slot[0][1], slot[1][0], slot[1][1]))
    return list(cells), data


def parse_binary_csv(source) -> list[BinaryStratum]:
    return load_binary(source)[1]


def parse_survival_csv(source) -> list[SurvivalRecord]:
    records = []
    for no, row in _rows(_read_text(source), SURVIVAL_HEADER):
        try:
            time = float(row["time"])
        except ValueError:
            raise ParseError(f"time must be a number, got {row['time']!r}", no) from None
        if not (time >= 0 and math.isfinite(time)):
            raise ParseError(f"time must be finite and >= 0, got {time}", no)
        event = _int(row["event"], "event", no)
        if event not in (0, 1):
            raise ParseError(f"event must be 0 or 1, got {event}", no)
        if not row["stratum"]:
            raise ParseError("stratum label is empty", no)
        records.append(SurvivalRecord(time, bool(event), _group(row["group"], no), row["stratum"]))
    if not records:
        raise ParseError("no data rows", 2)
    return records


def _load_json(source):
    try:
        return json.loads(_read_text(source))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None


def load_external_cis(source) -> tuple[list[ExternalCI], dict]:
    """External one-sample CIs and any extra top-level settings (measure, horizon, ...)."""
    doc = _load_json(source)
    entries, meta = (doc, {}) if isinstance(doc, list) else (doc.get("cis"), doc)
    if not isinstance(entries, list) or not entries:
        raise ParseError("expected a list of CI objects (or an object with a 'cis' list)")
    out = []
    for i, e in enumerate(entries):
        try:
            out.append(ExternalCI(
                stratum=str(e["stratum"]),
                group=int(e["group"]),
                estimate=float(e["estimate"]),
                lower=float(e["lower"]),
                upper=float(e["upper"]),
                level=float(e.get("level", 0.95)),
                variance=None if e.get("variance") is None else float(e["variance"]),
                n=None if e.get("n") is None else int(e["n"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"CI entry {i}: {exc!r}") from None
    return out, {k: v for k, v in meta.items() if k != "cis"}


def load_scenarios(source) -> list[Scenario]:
    doc = _load_json(source)
    if isinstance(doc, dict):
        doc = doc.get("scenarios", [doc])
    try:
        return [Scenario.from_dict(d) for d in doc]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid scenario: {exc}") from None


# --------------------------------------------------------------------------
# emitters
# --------------------------------------------------------------------------


def full(value: float) -> str:
    """Full-precision, round-trippable text for a float."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


def fixed3(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.3f}"


def _gamma_text(r: EffectResult, fmt) -> str:
    return "" if r.gamma is None else ";".join(fmt(g) for g in r.gamma)


def results_table(results: Sequence[EffectResult], failures=(), title: str | None = None) -> str:
    """Aligned human-readable table, three decimals."""
    out = []
    if title:
        out.append(title)
    for scale in (Scale.DIFFERENCE, Scale.RATIO):
        rows = [r for r in results if r.scale is scale]
        if not rows:
            continue
        w = rows[0].weights
        out.append(f"{scale.value} ({w.scheme.value} weights: {', '.join(fixed3(v) for v in w.resolved)})")
        header = ("method", "estimate", "lower", "upper", "gamma", "notes")
        body = [
            (r.method.value, fixed3(r.estimate), fixed3(r.ci.lower), fixed3(r.ci.upper),
             _gamma_text(r, lambda g: f"{g:.4f}"), ",".join(r.corrections))
            for r in rows
        ]
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        for line in (header, *body):
            out.append("  ".join(str(c).ljust(k) for c, k in zip(line, widths)).rstrip())
        out.append("")
    for method, scale, msg in failures:
        out.append(f"incomputable: {Method(method).value}/{Scale(scale).value}: {msg}")
    return "\n".join(out).rstrip() + "\n"


def results_csv(results: Sequence[EffectResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in results:
        writer.writerow([
            r.scale.value, r.method.value, r.weights.scheme.value, full(r.estimate),
            full(r.ci.lower), full(r.ci.upper), full(r.ci.level), _gamma_text(r, full),
            ";".join(full(v) for v in r.weights.resolved), ";".join(r.corrections),
        ])
    return buf.getvalue()


def results_json(results: Sequence[EffectResult], failures=(), extra: dict | None = None) -> str:
    doc = dict(extra or {})
    doc["results"] = [r.to_dict() for r in results]
    doc["failures"] = [
        {"method": Method(m).value, "scale": Scale(s).value, "error": msg} for m, s, msg in failures
    ]
    return json.dumps(doc, indent=2) + "\n"


def parse_results_json(text: str) -> list[EffectResult]:
    return [EffectResult.from_dict(d) for d in json.loads(text)["results"]]


def sim_csv(reports: Iterable[SimReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SIM_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        for row in rep.rows():
            row["rate"], row["mcse"] = full(row["rate"]), full(row["mcse"])
            writer.writerow(row)
    return buf.getvalue()


def sim_table(reports: Sequence[SimReport]) -> str:
    """One row per scenario, rates in percent with the 3-MCSE half-width."""
    methods: list[Method] = []
    for rep in reports:
        methods.extend(m for m in rep.methods if m not in methods)
    header = ["scenario", "metric", "kind"] + [m.value for m in methods]
    body = []
    for rep in reports:
        cells = [rep.scenario_id, rep.metric.value, rep.kind]
        for m in methods:
            r = rep.methods.get(m)
            cells.append("" if r is None else f"{100 * r.rate:.2f}±{300 * r.mcse:.2f}")
        body.append(cells)
    widths = [max(len(c) for c in col) for col in zip(header, *body)]
    return "\n".join("  ".join(c.ljust(k) for c, k in zip(line, widths)).rstrip()
                     for line in (header, *body)) + "\n"


def sim_json(reports: Sequence[SimReport], scenarios: Sequence[Scenario]) -> str:
    doc = []
    for rep, sc in zip(reports, scenarios):
        doc.append({
            "scenario": sc.to_dict(),
            "kind": rep.kind,
            "replicates": rep.replicates,
            "regenerations": rep.regenerations,
            "truth": sc.truth,
            "methods": [
                dict(row, bracket=[full(v) for v in rep.methods[Method(row["method"])].bracket])
                for row in rep.rows()
            ],
        })
    return json.dumps(doc, indent=2) + "\n"
