import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apexmarket import cli
from apexmarket.simulation import REGULARIZED, ScenarioConfig, StrategySpec, run_simulation
from conftest import FOUR, FOUR_P2, data_path


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data():
    return lambda name: str(data_path(name))


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)


# -- documents ----------------------------------------------------------------------------------

@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1), st.booleans())
@settings(max_examples=30, deadline=None)
def test_instance_roundtrip(n, seed, full):
    r = np.random.default_rng(seed)
    inst = {"n": n, "u": r.random((n, n))}
    if full:
        inst.update({"lambda": r.random(n), "x": r.random((n, n)), "prices": r.random(n), "budgets": r.random(n)})
    back = cli.parse_instance(cli.dump_instance(inst))
    for key, val in inst.items():
        assert np.array_equal(back[key], val)
    if not full:
        assert back["lambda"] is None and back["x"] is None


def test_scenario_roundtrip(data):
    cfg = cli.parse_scenario(open(data("oscillation.json")).read())
    again = cli.parse_scenario(cli.dumps(cli.scenario_doc(cfg)))
    assert cli.dumps(cli.scenario_doc(again)) == cli.dumps(cli.scenario_doc(cfg))
    assert again.strategies == cfg.strategies


def test_trace_roundtrip():
    cfg = ScenarioConfig(u=[[1, 0], [0.5, 1]], T=15, budgets=[3, 20], lambda_bar=4.0,
                         strategies=(StrategySpec("bwk-pacer", 2.0, jitter=0.3), StrategySpec("constant", 1.5)),
                         seed=11)
    tr = run_simulation(cfg)
    text = cli.dump_trace(tr)
    back = cli.parse_trace(text)
    assert cli.dump_trace(back) == text
    for a, b in zip(tr.rounds, back.rounds):
        assert np.array_equal(a.bids, b.bids) and np.array_equal(a.clamped, b.clamped)
        assert np.array_equal(a.allocation, b.allocation) and np.array_equal(a.charges, b.charges)


@pytest.mark.parametrize("text, fragment", [
    ('{"n": 2, "u": [1, 0, 1', "line 1 column"),
    ('{"u": [1, 0, 1, 0]}', "'n'"),
    ('{"n": 2, "u": [1, 0, 1]}', "needs 4 numbers"),
    ('{"n": 2, "u": [1, 0, "a", 0]}', "list of numbers"),
    ('{"n": 0, "u": []}', "positive integer"),
    ('[1, 2]', "JSON object"),
])
def test_instance_diagnostics(text, fragment):
    with pytest.raises(cli.DocumentError, match=fragment):
        cli.parse_instance(text)


@pytest.mark.parametrize("mutate, fragment", [
    (lambda d: d.pop("T"), "'T'"),
    (lambda d: d.update(backend="gold"), "backend"),
    (lambda d: d["strategies"][0].update(speed=3), "unknown fields"),
    (lambda d: d.update(strategies="best-response"), "regularized backend"),
    (lambda d: d["strategies"][1].update(cycle="yes"), "cycle"),
])
def test_scenario_diagnostics(data, mutate, fragment):
    doc = json.load(open(data("oscillation.json")))
    mutate(doc)
    with pytest.raises(cli.DocumentError, match=fragment):
        cli.parse_scenario(json.dumps(doc))


def test_truncated_trace_is_rejected(data, tmp_path):
    text = cli.dump_trace(run_simulation(cli.parse_scenario(open(data("oscillation.json")).read(), T=5)))
    lines = text.splitlines()
    with pytest.raises(cli.DocumentError, match="footer"):
        cli.parse_trace("\n".join(lines[:-1]))
    with pytest.raises(cli.DocumentError, match="expected round"):
        cli.parse_trace("\n".join([lines[0], lines[2], *lines[1:]]))


def test_non_finite_values_become_null():
    assert cli.dumps({"a": np.array([1.0, np.inf, np.nan])}) == '{"a": [1.0, null, null]}'


# -- commands -----------------------------------------------------------------------------------

def test_vcg_golden(data, capsys):
    code, out, _ = run(["vcg", data("four_by_four.json")], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["assignment"] == [0, 1, 2, 3]
    assert np.allclose(doc["prices"], FOUR_P2, atol=1e-9)
    assert np.allclose(doc["payments"], FOUR_P2, atol=1e-9)


def test_vcg_csv(data, capsys):
    code, out, _ = run(["vcg", data("four_by_four.json"), "--format", "csv"], capsys)
    rows = out.strip().splitlines()
    assert code == 0 and rows[0].startswith("index,assigned_item,item_price")
    assert len(rows) == 5
    assert np.isclose(float(rows[3].split(",")[2]), FOUR_P2[2])


def test_regularized_command(tmp_path, capsys):
    inst = tmp_path / "i.json"
    inst.write_text(cli.dump_instance({"n": 3, "u": np.array([[1, 0, .25], [0, 1, .75], [.5, 1, 0]]),
                                       "lambda": np.array([2.0, 1.0, 3.0])}))
    code, out, _ = run(["regularized", inst, "--lambda-bar", "3"], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["converged"]
    x = np.array(doc["x"]).reshape(3, 3)
    assert np.allclose(x.sum(0), 1, atol=1e-9) and np.allclose(x.sum(1), 1, atol=1e-9) and x.min() > 0
    assert np.isclose(doc["beta"], 3.0 ** -3 * 3 ** -4)
    assert all(p >= 0 for p in doc["payments"])


def test_regularized_rejects_unnormalized(data, capsys):
    code, out, err = run(["regularized", data("four_by_four.json"), "--lambda-bar", "3"], capsys)
    assert code == 2 and out == "" and "normalized" in err


def test_regularized_requires_cap(data, capsys):
    code, out, err = run(["regularized", data("four_by_four.json")], capsys)
    assert code == 2 and out == "" and "--lambda-bar" in err


@pytest.mark.parametrize("name, code", [("four_by_four_p1.json", 0), ("four_by_four_p2.json", 0),
                                        ("oscillation_verify.json", 1)])
def test_hz_verify_exit_codes(data, capsys, name, code):
    got, out, _ = run(["hz-verify", data(name)], capsys)
    assert got == code
    assert json.loads(out)["certificate"]["passed"] == (code == 0)


def test_hz_verify_needs_prices(data, capsys):
    code, _, err = run(["hz-verify", data("two_by_two.json")], capsys)
    assert code == 2 and "needs field" in err


def test_hz_find_and_certify(data, capsys):
    code, out, _ = run(["hz-find", data("two_by_two.json"), "--delta", "0.05", "--samples", "256"], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["converged"] and doc["certificate"]["passed"]
    assert np.allclose(np.array(doc["allocation"]).reshape(2, 2).sum(0), 1)


def test_hz_find_nonconvergence_exits_one(data, capsys):
    code, out, _ = run(["hz-find", data("four_by_four.json"), "--max-iter", "2"], capsys)
    assert code == 1 and not json.loads(out)["converged"]


@pytest.mark.parametrize("argv", [
    ["hz-find", "{d}", "--alpha", "1.5"],
    ["hz-find", "{d}", "--eps", "-1"],
    ["vcg", "{d}", "--seed", "-3"],
    ["vcg", "{d}", "--format", "xml"],
    ["nonsense", "{d}"],
])
def test_usage_errors_exit_two(data, capsys, argv):
    argv = [a.format(d=data("two_by_two.json")) for a in argv]
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 2


def test_malformed_input_writes_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n": 2, "u": [1, 0, 1,]}')
    out = tmp_path / "out.json"
    code, stdout, err = run(["vcg", bad, "--out", out], capsys)
    assert code == 2 and stdout == "" and not out.exists()
    assert "line 1 column" in err
    assert list(tmp_path.iterdir()) == [bad]


def test_missing_file(tmp_path, capsys):
    code, _, err = run(["vcg", tmp_path / "nope.json"], capsys)
    assert code == 2 and "nope.json" in err


def test_simulate_and_audit(data, tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert run(["simulate", data("oscillation.json"), "--out", trace], capsys)[0] == 0
    lines = trace.read_text().splitlines()
    assert len(lines) == 3002
    footer = json.loads(lines[-1])
    assert np.allclose(footer["mean_payments"], [1, 1])
    assert np.allclose(footer["x_bar"], [2 / 3, 1 / 3, 1 / 3, 2 / 3])
    code, out, _ = run(["audit", trace], capsys)
    doc = json.loads(out)
    assert code == 0 and all(r["normalized"] <= 1e-6 for r in doc["regret"])
    assert "aggregate" not in doc
    code, out, err = run(["audit", trace, "--aggregate"], capsys)
    assert code == 2 and out == "" and "regularized" in err


def test_regularized_scenario_audit(data, tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert run(["simulate", data("regularized_three.json"), "--out", trace], capsys)[0] == 0
    code, out, _ = run(["audit", trace, "--aggregate"], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["aggregate"]["certificate"]["passed"]
    assert doc["aggregate"]["concentration"] <= 1e-6


def test_simulate_csv(data, capsys):
    code, out, _ = run(["simulate", data("oscillation.json"), "--rounds", "3", "--format", "csv"], capsys)
    rows = out.strip().splitlines()
    assert code == 0 and len(rows) == 4 and rows[0].startswith("t,bid_0,bid_1,charge_0")
    assert rows[1].split(",")[1:3] == ["3.0", "4.0"]


def test_simulate_is_byte_identical(data, tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    sc = tmp_path / "s.json"
    doc = json.load(open(data("oscillation.json")))
    doc["strategies"] = [{"kind": "bwk-pacer", "value": 2.0, "jitter": 0.4}, {"kind": "constant", "value": 1.0}]
    doc["T"] = 50
    sc.write_text(json.dumps(doc))
    run(["simulate", sc, "--out", a], capsys)
    run(["simulate", sc, "--out", b], capsys)
    assert a.read_bytes() == b.read_bytes()


def test_seed_precedence(data, tmp_path, monkeypatch, capsys):
    sc = tmp_path / "s.json"
    doc = json.load(open(data("oscillation.json")))
    doc["strategies"] = [{"kind": "bwk-pacer", "value": 2.0, "jitter": 0.4}, {"kind": "constant", "value": 1.0}]
    doc["T"] = 5
    del doc["seed"]
    sc.write_text(json.dumps(doc))

    def seed_used(*extra):
        out = run(["simulate", sc, *extra], capsys)[1]
        return json.loads(out.splitlines()[0])["seed"]

    assert seed_used() == cli.DEFAULT_SEED
    monkeypatch.setenv(cli.SEED_ENV, "17")
    assert seed_used() == 17
    doc["seed"] = 5
    sc.write_text(json.dumps(doc))
    assert seed_used() == 5
    assert seed_used("--seed", "9") == 9
    monkeypatch.setenv(cli.SEED_ENV, "x")
    code, _, err = run(["simulate", sc], capsys)
    # a document seed makes the environment irrelevant, so this still succeeds
    assert code == 0
    del doc["seed"]
    sc.write_text(json.dumps(doc))
    code, _, err = run(["simulate", sc], capsys)
    assert code == 2 and cli.SEED_ENV in err


def test_sweep(data, tmp_path, capsys):
    sc = tmp_path / "s.json"
    doc = json.load(open(data("oscillation.json")))
    doc["strategies"] = [{"kind": "bwk-pacer", "value": 2.0, "jitter": 0.4}, {"kind": "constant", "value": 1.0}]
    doc["T"] = 20
    sc.write_text(json.dumps(doc))
    serial, parallel = tmp_path / "serial", tmp_path / "parallel"
    assert run(["sweep", sc, "--runs", "3", "--out", serial], capsys)[0] == 0
    assert run(["sweep", sc, "--runs", "3", "--workers", "2", "--out", parallel], capsys)[0] == 0
    names = sorted(p.name for p in serial.iterdir())
    assert names == ["run-0000.jsonl", "run-0001.jsonl", "run-0002.jsonl", "summary.jsonl"]
    for name in names:
        assert (serial / name).read_bytes() == (parallel / name).read_bytes()
    summary = [json.loads(ln) for ln in (serial / "summary.jsonl").read_text().splitlines()]
    assert [s["seed"] for s in summary] == [0, 1, 2]
    for s in summary:
        tr = cli.parse_trace((serial / s["trace"]).read_text())
        assert np.allclose(tr.mean_payments, s["mean_payments"])
    assert run(["sweep", sc, "--runs", "2", "--format", "csv", "--out", tmp_path / "c"], capsys)[0] == 0
    head = (tmp_path / "c" / "summary.csv").read_text().splitlines()[0]
    assert head.startswith("run,seed,trace,mean_payment_0")


def test_sweep_needs_out_dir(data, capsys):
    assert run(["sweep", data("oscillation.json")], capsys)[0] == 2


def test_console_entry_point(data):
    proc = subprocess.run([sys.executable, "-m", "apexmarket.cli", "vcg", data("four_by_four.json")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert np.allclose(json.loads(proc.stdout)["prices"], FOUR_P2, atol=1e-9)
