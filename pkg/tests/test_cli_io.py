import csv
import io
import json
import math
from dataclasses import replace

import pytest

from stratmover.binary import BinaryStratum, analyze_binary
from stratmover.cli import main
from stratmover.core import ConfidenceInterval, Method, Scale, Scheme
from stratmover.errors import InputError, MissingCell, ParseError
from stratmover.io import (
    SIM_COLUMNS,
    bundled,
    load_binary,
    load_scenarios,
    parse_binary_csv,
    parse_results_json,
    parse_survival_csv,
    results_csv,
    results_json,
    results_table,
)
from stratmover.simulation import Metric, Scenario

from conftest import BIOASSAY

HEADER = "stratum,group,events,total\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_bundled_bioassay():
    labels, data = load_binary(bundled("bioassay.csv"))
    assert labels == ["1", "2", "3", "4"]
    assert data == BIOASSAY


def test_shuffled_rows_parse_identically(tmp_path):
    lines = bundled("bioassay.csv").read_text().splitlines()
    body = lines[1:]
    # keep first appearance of each stratum in place, shuffle within strata
    pairs = [body[i:i + 2][::-1] for i in range(0, len(body), 2)]
    text = HEADER + "\n".join(line for pair in pairs for line in pair) + "\n"
    assert parse_binary_csv(write(tmp_path, "s.csv", text)) == BIOASSAY


def test_strata_follow_first_appearance(tmp_path):
    text = HEADER + "b,0,1,10\na,0,2,10\nb,1,3,10\na,1,4,10\n"
    labels, data = load_binary(write(tmp_path, "o.csv", text))
    assert labels == ["b", "a"]
    assert data[0] == BinaryStratum(1, 10, 3, 10)


@pytest.mark.parametrize(
    "text,line",
    [
        ("", 1),
        ("stratum,group,count,total\n1,0,1,2\n", 1),
        (HEADER + "1,0,1,2\n1,2,1,2\n", 3),
        (HEADER + "1,0,x,2\n", 2),
        (HEADER + "1,0,5,2\n", 2),
        (HEADER + "1,0,1,2\n1,0,1,2\n", 3),
        (HEADER + "1,0,1\n", 2),
    ],
)
def test_parse_errors_carry_line_numbers(tmp_path, text, line):
    with pytest.raises(ParseError) as err:
        parse_binary_csv(write(tmp_path, "bad.csv", text))
    assert err.value.line == line


def test_missing_cell(tmp_path):
    with pytest.raises(MissingCell):
        parse_binary_csv(write(tmp_path, "m.csv", HEADER + "1,0,1,5\n1,1,2,5\n2,1,1,4\n"))


def test_survival_csv(tmp_path):
    recs = parse_survival_csv(bundled("survival_synthetic.csv"))
    assert {r.stratum for r in recs} == {"male", "female"}
    with pytest.raises(ParseError) as err:
        parse_survival_csv(write(tmp_path, "s.csv", "time,event,group,stratum\n1.0,2,0,a\n"))
    assert err.value.line == 2


def test_missing_file():
    with pytest.raises(InputError):
        parse_binary_csv("/nonexistent/none.csv")


# ---------------------------------------------------------------- emitters


def test_json_round_trip_exact():
    for scheme in (Scheme.MH, Scheme.INV, Scheme.MR):
        a = analyze_binary(BIOASSAY, scheme)
        assert parse_results_json(results_json(a.results, a.failures)) == a.results


def test_json_round_trip_unbounded():
    base = analyze_binary(BIOASSAY, Scheme.MH).get(Method.AVL, Scale.RATIO)
    r = replace(base, ci=ConfidenceInterval(base.ci.lower, math.inf, base.ci.level))
    text = results_json([r])
    assert json.loads(text)["results"][0]["ci"]["upper"] == "inf"
    assert parse_results_json(text) == [r]


def test_table_and_csv_carry_the_same_numbers():
    a = analyze_binary(BIOASSAY, Scheme.MH)
    rows = list(csv.DictReader(io.StringIO(results_csv(a.results))))
    table = results_table(a.results)
    for row in rows:
        cells = [f"{float(row[k]):.3f}" for k in ("estimate", "lower", "upper")]
        assert any(line.split()[:4] == [row["method"], *cells] for line in table.splitlines())


def test_csv_full_precision():
    a = analyze_binary(BIOASSAY, Scheme.MH)
    rows = list(csv.DictReader(io.StringIO(results_csv(a.results))))
    assert [float(r["lower"]) for r in rows] == [r.ci.lower for r in a.results]


# ---------------------------------------------------------------- CLI


def test_cli_bioassay_table(capsys):
    code = main(["analyze-binary", "--input", "bioassay.csv", "--scheme", "mh", "--methods", "all"])
    out = capsys.readouterr().out
    assert code == 0
    assert "AV      0.106     0.038  0.225" in out
    assert "ACL     2.674     1.368  5.080" in out


def test_cli_json_and_output_file(tmp_path):
    out = tmp_path / "r.json"
    code = main(["analyze-binary", "--input", str(bundled("bioassay.csv")), "--scheme", "mr",
                 "--methods", "ac,ac2", "--format", "json", "--output", str(out)])
    assert code == 0
    results = parse_results_json(out.read_text())
    assert [r.method.value for r in results] == ["AC", "AC2"]
    assert all(round(r.ci.lower, 3) == 0.022 for r in results)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["analyze-binary", "--input", str(tmp_path / "nope.csv")]) == 2
    bad = write(tmp_path, "bad.csv", "stratum,group\n")
    assert main(["analyze-binary", "--input", str(bad)]) == 2
    none = write(tmp_path, "none.csv", HEADER + "1,0,0,10\n1,1,0,10\n2,0,0,8\n2,1,0,9\n")
    assert main(["analyze-binary", "--input", str(none)]) == 3
    err = capsys.readouterr().err
    assert "incomputable" in err
    with pytest.raises(SystemExit) as exc:
        main(["analyze-binary", "--input", "bioassay.csv", "--level", "1.5"])
    assert exc.value.code == 2


def test_cli_survival_external(capsys, tmp_path):
    cis = bundled("rmst_external_ci.json")
    code = main(["analyze-survival", "--horizon", "8", "--external-ci", str(cis), "--format", "csv"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    av = next(r for r in rows if r["method"] == "AV" and r["scale"] == "difference")
    assert round(float(av["lower"]), 3) == 0.049
    assert round(float(av["upper"]), 3) == 1.584
    assert any("approximate_relevel" in r["corrections"] for r in rows)


def test_cli_survival_needs_measure(capsys):
    assert main(["analyze-survival", "--input", str(bundled("survival_synthetic.csv"))]) == 2


def test_cli_simulate_example_csv(capsys):
    code = main(["simulate", "--example", "6", "--replicates", "300", "--seed", "42", "--filter", "MH-n50-"])
    out = capsys.readouterr().out
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert tuple(rows[0]) == SIM_COLUMNS
    assert {r["scenario_id"] for r in rows} == {"ex6-MH-n50-rd0", "ex6-MH-n50-rd0.05"}
    again = main(["simulate", "--example", "6", "--replicates", "300", "--seed", "42",
                  "--filter", "MH-n50-", "--workers", "2"])
    assert again == 0 and capsys.readouterr().out == out


def test_cli_simulate_scenario_file(tmp_path, capsys):
    sc = Scenario((0.2, 0.3), 1.5, ((20, 20), (30, 30)), Metric.RR, methods=("AV", "ACL"),
                  replicates=200, seed=3, scenario_id="mine")
    path = write(tmp_path, "sc.json", json.dumps({"scenarios": [sc.to_dict()]}))
    assert load_scenarios(path) == [sc]
    assert main(["simulate", "--scenario", str(path), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc[0]["scenario"]["scenario_id"] == "mine"
    assert doc[0]["replicates"] == 200
    assert {m["method"] for m in doc[0]["methods"]} == {"AV", "ACL"}


def test_cli_simulate_unknown_example(capsys):
    assert main(["simulate", "--example", "9", "--replicates", "10"]) == 2
