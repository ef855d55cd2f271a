"""Command-line front end.

Documents are JSON objects. Matrices are stored row-major as flat lists next
to their size ``n``:

instance document
    ``n``, ``u`` (n*n numbers) and optionally ``lambda``, ``x`` (n*n),
    ``prices`` and ``budgets``.
scenario document
    ``u``, ``n``, ``T``, ``budgets``, ``backend`` ("exact-vcg" or
    "regularized"), ``strategies`` and optionally ``lambda_bar``, ``beta``,
    ``seed``. ``strategies`` is a list of ``{"kind": ..., ...}`` objects with
    the fields of :class:`~apexmarket.simulation.StrategySpec`, or the string
    ``"best-response"`` (regularized backend only) for mutually best-responding
    constant bids.
trace
    JSON lines: a ``header`` record echoing the resolved scenario, one
    ``round`` record per round (``t``, ``bids``, ``allocation``, ``charges``,
    ``utilities``, ``budget_remaining``, ``clamped``) and a ``footer`` record
    with the aggregates.

Exit status is 0 on success or pass, 1 on a failed verification or
non-convergence, 2 on usage or configuration errors. Nothing is written to
``--out`` unless the command gets far enough to produce its full output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .assignment import AssignmentError, vcg_outcome
from .equilibrium import certify_solution, envy_check, find_hz_equilibrium, verify_ce
from .regularized import (
    ConvergenceError,
    RegularizationError,
    RegularizerParams,
    minimize_eta,
    regularized_optimum,
    regularized_payments,
)
from .simulation import (
    EXACT,
    REGULARIZED,
    ConfigError,
    RoundRecord,
    ScenarioConfig,
    SimulationTrace,
    StrategySpec,
    aggregate_and_verify,
    audit_strong_regret,
    mutual_best_responses,
    run_simulation,
)

DEFAULT_SEED = 0
SEED_ENV = "APEXMARKET_SEED"
FORMAT_VERSION = 1

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class DocumentError(ValueError):
    """A document could not be parsed; the message names the file and field."""


# -- json helpers ---------------------------------------------------------------

def _plain(obj):
    """Convert numpy values and containers to JSON-ready Python objects (non-finite -> None)."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(doc) -> str:
    return json.dumps(_plain(doc), sort_keys=True, allow_nan=False)


def _load_json(text: str, source: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise DocumentError(f"{path}: {exc.strerror}") from None


def _field(doc: dict, key: str, source: str, *, required=True, default=None):
    if not isinstance(doc, dict):
        raise DocumentError(f"{source}: expected a JSON object")
    if key not in doc:
        if required:
            raise DocumentError(f"{source}: missing field {key!r}")
        return default
    return doc[key]


def _numbers(value, key: str, source: str, length: int | None = None) -> np.ndarray:
    if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise DocumentError(f"{source}: field {key!r} must be a list of numbers")
    arr = np.array(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DocumentError(f"{source}: field {key!r} contains non-finite values")
    if length is not None and arr.size != length:
        raise DocumentError(f"{source}: field {key!r} needs {length} numbers, got {arr.size}")
    return arr


def _size(doc, source) -> int:
    n = _field(doc, "n", source)
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise DocumentError(f"{source}: field 'n' must be a positive integer")
    return n


def _number(value, key, source, *, integer=False):
    ok = isinstance(value, int) if integer else isinstance(value, (int, float))
    if not ok or isinstance(value, bool) or not math.isfinite(value):
        kind = "an integer" if integer else "a number"
        raise DocumentError(f"{source}: field {key!r} must be {kind}")
    return int(value) if integer else float(value)


# -- instance documents --------------------------------------------------------------

def parse_instance(text: str, source: str = "<input>") -> dict:
    """Parse an instance document into arrays; optional fields map to ``None``."""
    doc = _load_json(text, source)
    n = _size(doc, source)
    out = {"n": n, "u": _numbers(_field(doc, "u", source), "u", source, n * n).reshape(n, n)}
    for key, length, shape in (("lambda", n, (n,)), ("x", n * n, (n, n)),
                               ("prices", n, (n,)), ("budgets", n, (n,))):
        raw = _field(doc, key, source, required=False)
        out[key] = None if raw is None else _numbers(raw, key, source, length).reshape(shape)
    return out


def dump_instance(inst: dict) -> str:
    doc = {"n": inst["n"], "u": inst["u"].ravel()}
    for key in ("lambda", "x", "prices", "budgets"):
        if inst.get(key) is not None:
            doc[key] = np.asarray(inst[key]).ravel()
    return dumps(doc) + "\n"


# -- scenario documents --------------------------------------------------------------

_STRATEGY_FIELDS = {"kind", "value", "script", "cycle", "rate", "step", "jitter"}


def _parse_strategy(raw, k: int, source: str) -> StrategySpec:
    where = f"strategies[{k}]"
    if not isinstance(raw, dict):
        raise DocumentError(f"{source}: {where} must be an object")
    extra = set(raw) - _STRATEGY_FIELDS
    if extra:
        raise DocumentError(f"{source}: {where} has unknown fields {sorted(extra)}")
    kind = raw.get("kind")
    if not isinstance(kind, str):
        raise DocumentError(f"{source}: {where}.kind must be a string")
    kw = {"kind": kind}
    for key in ("value", "step", "jitter"):
        if key in raw:
            kw[key] = _number(raw[key], f"{where}.{key}", source)
    if raw.get("rate") is not None:
        kw["rate"] = _number(raw["rate"], f"{where}.rate", source)
    if "script" in raw:
        kw["script"] = tuple(_numbers(raw["script"], f"{where}.script", source).tolist())
    if "cycle" in raw:
        if not isinstance(raw["cycle"], bool):
            raise DocumentError(f"{source}: {where}.cycle must be true or false")
        kw["cycle"] = raw["cycle"]
    return StrategySpec(**kw)


def parse_scenario(text: str, source: str = "<input>", **overrides) -> ScenarioConfig:
    """Parse a scenario document. ``overrides`` (``T``, ``seed``, ``lambda_bar``,
    ``beta``) replace document fields when not ``None``."""
    doc = _load_json(text, source)
    n = _size(doc, source)
    u = _numbers(_field(doc, "u", source), "u", source, n * n).reshape(n, n)
    T = _number(_field(doc, "T", source), "T", source, integer=True)
    budgets = _numbers(_field(doc, "budgets", source), "budgets", source, n)
    backend = _field(doc, "backend", source, required=False, default=EXACT)
    if backend not in (EXACT, REGULARIZED):
        raise DocumentError(f"{source}: field 'backend' must be {EXACT!r} or {REGULARIZED!r}")
    opt = {}
    for key in ("lambda_bar", "beta"):
        if doc.get(key) is not None:
            opt[key] = _number(doc[key], key, source)
    seed = doc.get("seed")
    if seed is not None:
        opt["seed"] = _number(seed, "seed", source, integer=True)
    if overrides.get("T") is not None:
        T = overrides["T"]
    for key in ("lambda_bar", "beta", "seed"):
        if overrides.get(key) is not None:
            opt[key] = overrides[key]
    if "seed" not in opt:
        opt["seed"] = _default_seed()

    raw = _field(doc, "strategies", source)
    if raw == "best-response":
        if backend != REGULARIZED:
            raise DocumentError(f"{source}: 'best-response' strategies need the regularized backend")
        probe = ScenarioConfig(u=u, T=T, budgets=budgets, strategies=(StrategySpec("constant", 0.0),) * n,
                               backend=backend, **opt)
        lam, _ = mutual_best_responses(probe.u, probe.params, probe.budgets, probe.T)
        strategies = tuple(StrategySpec("constant", float(v)) for v in lam)
    elif isinstance(raw, list):
        strategies = tuple(_parse_strategy(s, k, source) for k, s in enumerate(raw))
    else:
        raise DocumentError(f"{source}: field 'strategies' must be a list or \"best-response\"")
    return ScenarioConfig(u=u, T=T, budgets=budgets, strategies=strategies, backend=backend, **opt)


def _strategy_doc(s: StrategySpec) -> dict:
    doc = {"kind": s.kind, "value": s.value}
    if s.kind == "replay":
        doc.update(script=list(s.script), cycle=s.cycle)
    if s.kind == "bwk-pacer":
        doc.update(rate=s.rate, step=s.step, jitter=s.jitter)
    return doc


def scenario_doc(cfg: ScenarioConfig) -> dict:
    return {
        "n": cfg.n, "u": cfg.u.ravel(), "T": cfg.T, "budgets": cfg.budgets, "backend": cfg.backend,
        "lambda_bar": cfg.lambda_bar, "beta": cfg.beta, "seed": cfg.seed,
        "strategies": [_strategy_doc(s) for s in cfg.strategies],
    }


# -- traces ------------------------------------------------------------------------------

def dump_trace(trace: SimulationTrace) -> str:
    lines = [dumps({"record": "header", "version": FORMAT_VERSION, "seed": trace.config.seed,
                    "config": scenario_doc(trace.config)})]
    for r in trace.rounds:
        lines.append(dumps({
            "record": "round", "t": r.t, "bids": r.bids, "allocation": r.allocation.ravel(),
            "charges": r.charges, "utilities": r.utilities, "budget_remaining": r.budget_remaining,
            "clamped": r.clamped,
        }))
    lines.append(dumps({
        "record": "footer", "T": len(trace.rounds), "x_bar": trace.x_bar.ravel(),
        "mean_payments": trace.mean_payments, "mean_utilities": trace.mean_utilities,
        "total_charges": sum(r.charges for r in trace.rounds),
    }))
    return "\n".join(lines) + "\n"


def parse_trace(text: str, source: str = "<trace>") -> SimulationTrace:
    rows = [ln for ln in text.splitlines()]
    if not rows:
        raise DocumentError(f"{source}: empty trace")
    records = [_load_json(ln, f"{source}:{k + 1}") for k, ln in enumerate(rows)]
    head = records[0]
    if not isinstance(head, dict) or head.get("record") != "header":
        raise DocumentError(f"{source}:1: first record must be the header")
    cfg_doc = _field(head, "config", f"{source}:1")
    try:
        config = parse_scenario(json.dumps(cfg_doc), f"{source}:1 config")
    except ValueError as exc:
        raise DocumentError(str(exc)) from None
    n = config.n
    rounds = []
    footer = None
    for k, rec in enumerate(records[1:], start=2):
        where = f"{source}:{k}"
        kind = _field(rec, "record", where)
        if footer is not None:
            raise DocumentError(f"{where}: record after the footer")
        if kind == "footer":
            footer = rec
            continue
        if kind != "round":
            raise DocumentError(f"{where}: unknown record type {kind!r}")
        t = _number(_field(rec, "t", where), "t", where, integer=True)
        if t != len(rounds):
            raise DocumentError(f"{where}: expected round {len(rounds)}, got {t}")
        clamped = _field(rec, "clamped", where)
        if not isinstance(clamped, list) or len(clamped) != n or not all(isinstance(c, bool) for c in clamped):
            raise DocumentError(f"{where}: field 'clamped' must be {n} booleans")
        rounds.append(RoundRecord(
            t=t,
            bids=_numbers(_field(rec, "bids", where), "bids", where, n),
            allocation=_numbers(_field(rec, "allocation", where), "allocation", where, n * n).reshape(n, n),
            charges=_numbers(_field(rec, "charges", where), "charges", where, n),
            utilities=_numbers(_field(rec, "utilities", where), "utilities", where, n),
            budget_remaining=_numbers(_field(rec, "budget_remaining", where), "budget_remaining", where, n),
            clamped=np.array(clamped, dtype=bool),
        ))
    if footer is None:
        raise DocumentError(f"{source}: missing footer (truncated trace?)")
    if not rounds:
        raise DocumentError(f"{source}: trace has no rounds")
    if _field(footer, "T", f"{source}:footer") != len(rounds):
        raise DocumentError(f"{source}: footer T does not match the {len(rounds)} rounds present")
    return SimulationTrace.from_rounds(config, rounds)


def trace_csv(trace: SimulationTrace) -> str:
    n = trace.config.n
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["t"]
    for name in ("bid", "charge", "utility", "budget_remaining", "clamped"):
        cols += [f"{name}_{i}" for i in range(n)]
    w.writerow(cols)
    for r in trace.rounds:
        w.writerow([r.t, *map(repr, r.bids.tolist()), *map(repr, r.charges.tolist()),
                    *map(repr, r.utilities.tolist()), *map(repr, r.budget_remaining.tolist()),
                    *(int(c) for c in r.clamped)])
    return buf.getvalue()


# -- result documents ---------------------------------------------------------------

def certificate_doc(cert) -> dict:
    return {
        "passed": cert.passed, "delta": cert.delta, "bistochastic": cert.bistochastic,
        "prices_match": cert.prices_match, "support_optimal": cert.support_optimal,
        "within_budget": cert.within_budget, "demand_satisfied": cert.demand_satisfied,
        "budget_spent": cert.budget_spent, "budgets": cert.budgets,
        "best_bundle_value": cert.best_bundle_value, "realized_value": cert.realized_value,
        "gap": cert.gap, "raw_best_value": cert.raw_best_value,
        "raw_realized_value": cert.raw_realized_value, "raw_gap": cert.raw_gap,
        "failing_players": cert.failing_players(), "details": cert.details,
    }


def regret_doc(rep) -> dict:
    return {
        "player": rep.player, "realized_utility": rep.realized_utility,
        "best_response_lambda": rep.best_response_lambda,
        "best_response_utility": rep.best_response_utility,
        "best_response_spend": rep.best_response_spend, "strong_regret": rep.strong_regret,
        "normalized": rep.normalized, "budget": rep.budget, "mix": [list(m) for m in rep.mix],
        "lower_bound_only": rep.lower_bound_only,
    }


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in _plain(row)])
    return buf.getvalue()


# -- commands ------------------------------------------------------------------------------
# Each returns (exit status, output text).

def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        seed = int(raw)
    except ValueError:
        raise DocumentError(f"environment {SEED_ENV}={raw!r} is not an integer") from None
    if seed < 0:
        raise DocumentError(f"environment {SEED_ENV} must be nonnegative")
    return seed


def cmd_vcg(args):
    inst = parse_instance(_read(args.input), args.input)
    out = vcg_outcome(inst["u"], inst["lambda"])
    doc = {
        "command": "vcg", "n": inst["n"], "assignment": list(out.assignment.pi),
        "value": out.assignment.value, "prices": out.prices, "payments": out.payments,
        "duals": {"a": out.duals.a, "b": out.duals.b},
    }
    if args.format == "csv":
        n = inst["n"]
        rows = [(i, out.assignment.pi[i], out.prices[i], out.payments[i], out.duals.a[i], out.duals.b[i])
                for i in range(n)]
        return EXIT_OK, _table(["index", "assigned_item", "item_price", "payment", "dual_player", "dual_item"], rows)
    return EXIT_OK, dumps(doc) + "\n"


def cmd_regularized(args):
    inst = parse_instance(_read(args.input), args.input)
    n = inst["n"]
    lam = inst["lambda"] if inst["lambda"] is not None else np.ones(n)
    if args.lambda_bar is None:
        raise DocumentError("regularized needs --lambda-bar")
    params = (RegularizerParams(args.beta, args.lambda_bar) if args.beta is not None
              else RegularizerParams.canonical(args.lambda_bar, n))
    try:
        opt = regularized_optimum(inst["u"], lam, params, tol=args.tol if args.tol is not None else 1e-10)
    except ConvergenceError as exc:
        return EXIT_FAIL, dumps({"command": "regularized", "converged": False, "error": str(exc)}) + "\n"
    pay = regularized_payments(inst["u"], lam, params, optimum=opt)
    eta = minimize_eta(lam, n, params)
    w = lam[:, None] * inst["u"]
    doc = {
        "command": "regularized", "converged": True, "n": n, "lambda": lam, "beta": params.beta,
        "lambda_bar": params.lambda_bar, "x": opt.x.ravel(), "payments": pay,
        "duals": {"a": opt.a, "b": opt.b}, "value_reg": opt.value_reg, "value_linear": opt.value_linear,
        "residual": opt.residual, "stationarity": opt.stationarity_residual(w, params.beta),
        "iterations": opt.iterations, "eta": eta.eta, "eta_M": eta.M,
    }
    if args.format == "csv":
        rows = [(i, lam[i], pay[i], *opt.x[i]) for i in range(n)]
        return EXIT_OK, _table(["player", "lambda", "payment", *[f"x_{j}" for j in range(n)]], rows)
    return EXIT_OK, dumps(doc) + "\n"


def cmd_hz_find(args):
    inst = parse_instance(_read(args.input), args.input)
    seed = args.seed if args.seed is not None else _default_seed()
    sol = find_hz_equilibrium(
        inst["u"], eps=args.eps, alpha=args.alpha, tol=args.tol if args.tol is not None else 1e-3,
        samples=args.samples, seed=seed, lambda_bar=args.lambda_bar, max_iter=args.max_iter)
    doc = {
        "command": "hz-find", "n": inst["n"], "lambda_star": sol.lambda_star, "box_center": sol.box_center,
        "allocation": sol.allocation.ravel(), "prices": sol.prices, "phi": sol.phi,
        "residual": sol.residual, "iterations": sol.iterations, "converged": sol.converged,
        "lambda_bar": sol.lambda_bar, "degenerate": sol.degenerate, "eps": sol.eps,
        "samples": sol.samples, "seed": sol.seed, "final_alpha": sol.final_alpha,
    }
    status = EXIT_OK if sol.converged else EXIT_FAIL
    if args.delta is not None:
        cert = certify_solution(inst["u"], sol, args.delta)
        doc["certificate"] = certificate_doc(cert)
        if not cert.passed:
            status = EXIT_FAIL
    if args.format == "csv":
        rows = [(i, sol.lambda_star[i], sol.prices[i], sol.phi[i]) for i in range(inst["n"])]
        return status, _table(["index", "lambda_star", "item_price", "expected_payment"], rows)
    return status, dumps(doc) + "\n"


def cmd_hz_verify(args):
    inst = parse_instance(_read(args.input), args.input)
    for key in ("x", "prices"):
        if inst[key] is None:
            raise DocumentError(f"{args.input}: hz-verify needs field {key!r}")
    delta = args.delta if args.delta is not None else 1e-9
    cert = verify_ce(inst["u"], inst["x"], inst["prices"], weights=inst["lambda"],
                     budgets=inst["budgets"], delta=delta)
    envy = envy_check(inst["u"], inst["x"])
    status = EXIT_OK if cert.passed else EXIT_FAIL
    if args.format == "csv":
        rows = [(i, cert.budget_spent[i], cert.budgets[i], cert.best_bundle_value[i],
                 cert.realized_value[i], cert.gap[i]) for i in range(inst["n"])]
        return status, _table(["player", "budget_spent", "budget", "best_bundle_value",
                               "realized_value", "gap"], rows)
    doc = {"command": "hz-verify", "certificate": certificate_doc(cert),
           "envy_free": envy.envy_free, "envy_pairs": [list(p) for p in envy.pairs]}
    return status, dumps(doc) + "\n"


def _scenario_from_args(args, seed_offset: int = 0) -> ScenarioConfig:
    seed = args.seed if args.seed is not None else None
    cfg = parse_scenario(_read(args.input), args.input, T=args.rounds, seed=seed,
                         lambda_bar=args.lambda_bar, beta=args.beta)
    if seed_offset:
        cfg = parse_scenario(dumps(scenario_doc(cfg) | {"seed": cfg.seed + seed_offset}), args.input)
    return cfg


def cmd_simulate(args):
    trace = run_simulation(_scenario_from_args(args))
    text = trace_csv(trace) if args.format == "csv" else dump_trace(trace)
    return EXIT_OK, text


def cmd_audit(args):
    trace = parse_trace(_read(args.input), args.input)
    cfg = trace.config
    if args.aggregate and cfg.backend != REGULARIZED:
        raise ConfigError(
            "aggregate verification needs a regularized trace: an unregularized run can have zero "
            "regret for everyone while its average allocation is supported by no prices")
    reports = [audit_strong_regret(trace, i) for i in range(cfg.n)]
    status = EXIT_OK
    doc = {"command": "audit", "backend": cfg.backend, "T": len(trace.rounds),
           "regret": [regret_doc(r) for r in reports],
           "envy_pairs": [list(p) for p in envy_check(cfg.u, trace.x_bar).pairs]}
    if cfg.backend == REGULARIZED:
        agg = aggregate_and_verify(trace, args.delta if args.delta is not None else 0.1)
        doc["aggregate"] = {
            "certificate": certificate_doc(agg.certificate), "concentration": agg.concentration,
            "best_response_lambdas": agg.best_response_lambdas, "prices": agg.prices,
            "scaled_prices": agg.scaled_prices,
        }
        if not agg.certificate.passed:
            status = EXIT_FAIL
    if args.format == "csv":
        rows = [(r.player, r.realized_utility, r.best_response_lambda, r.best_response_utility,
                 r.best_response_spend, r.strong_regret, r.normalized) for r in reports]
        return status, _table(["player", "realized_utility", "best_response_lambda", "best_response_utility",
                               "best_response_spend", "strong_regret", "normalized"], rows)
    return status, dumps(doc) + "\n"


def _sweep_run(payload):
    text, source, k = payload
    cfg = parse_scenario(text, source)
    trace = run_simulation(cfg)
    return k, cfg.seed, dump_trace(trace), trace.mean_payments, trace.mean_utilities, \
        int(sum(r.clamped.sum() for r in trace.rounds))


def cmd_sweep(args):
    if args.out is None:
        raise DocumentError("sweep needs --out DIR for the per-run traces")
    base = _scenario_from_args(args)
    payloads = [(dumps(scenario_doc(base) | {"seed": base.seed + k}), args.input, k) for k in range(args.runs)]
    if args.workers == 1:
        results = [_sweep_run(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_run, payloads))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, seed, text, pay, util, clamps in results:
        name = f"run-{k:04d}.jsonl"
        _write_atomic(out_dir / name, text)
        rows.append({"run": k, "seed": seed, "trace": name, "mean_payments": pay,
                     "mean_utilities": util, "clamped_rounds": clamps})
    if args.format == "csv":
        n = base.n
        table = [(r["run"], r["seed"], r["trace"], *r["mean_payments"], *r["mean_utilities"], r["clamped_rounds"])
                 for r in rows]
        summary = _table(["run", "seed", "trace", *[f"mean_payment_{i}" for i in range(n)],
                          *[f"mean_utility_{i}" for i in range(n)], "clamped_rounds"], table)
    else:
        summary = "".join(dumps(r) + "\n" for r in rows)
    _write_atomic(out_dir / ("summary.csv" if args.format == "csv" else "summary.jsonl"), summary)
    return EXIT_OK, None


COMMANDS = {
    "vcg": cmd_vcg, "regularized": cmd_regularized, "hz-find": cmd_hz_find, "hz-verify": cmd_hz_verify,
    "simulate": cmd_simulate, "audit": cmd_audit, "sweep": cmd_sweep,
}


# -- argument parsing ------------------------------------------------------------------------

def _positive(kind):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a valid {kind.__name__}: {text!r}") from None
        if not (v > 0 and math.isfinite(v)):
            raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
        return v
    return conv


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative: {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apexmarket", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, input_help):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("input", help=input_help)
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--format", choices=("lines", "csv"), default="lines")
        sp.add_argument("--seed", type=_nonneg_int,
                        help=f"RNG seed (default: ${SEED_ENV} or {DEFAULT_SEED})")
        return sp

    add("vcg", "VCG assignment, prices and payments", "instance document")
    sp = add("regularized", "regularized optimum and payments", "instance document")
    sp.add_argument("--lambda-bar", type=_positive(float))
    sp.add_argument("--beta", type=_positive(float), help="default: lambda_bar**-3 * n**-4")
    sp.add_argument("--tol", type=_positive(float))

    sp = add("hz-find", "search for an equilibrium of the smoothed price map", "instance document")
    sp.add_argument("--eps", type=_positive(float), default=0.01)
    sp.add_argument("--alpha", type=_positive(float), default=0.3)
    sp.add_argument("--tol", type=_positive(float))
    sp.add_argument("--samples", type=_positive(int), default=512)
    sp.add_argument("--max-iter", type=_positive(int), default=5000)
    sp.add_argument("--lambda-bar", type=_positive(float))
    sp.add_argument("--delta", type=_positive(float), help="also certify the result at this slack")

    sp = add("hz-verify", "check allocation and prices as an equilibrium", "instance document with x and prices")
    sp.add_argument("--delta", type=_positive(float))

    for name, help_ in (("simulate", "run a repeated-game scenario"),
                        ("sweep", "run a scenario for several seeds in parallel")):
        sp = add(name, help_, "scenario document")
        sp.add_argument("--rounds", type=_positive(int), help="override T")
        sp.add_argument("--lambda-bar", type=_positive(float))
        sp.add_argument("--beta", type=_positive(float))
        if name == "sweep":
            sp.add_argument("--runs", type=_positive(int), default=4)
            sp.add_argument("--workers", type=_positive(int), default=1)

    sp = add("audit", "strong regret per player and, for regularized runs, the aggregate certificate",
             "trace file")
    sp.add_argument("--delta", type=_positive(float), help="aggregate certificate slack (default 0.1)")
    sp.add_argument("--aggregate", action="store_true",
                    help="require the aggregate certificate (error for exact-backend traces)")
    return p


def _write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "hz-find" and args.alpha > 1:
        print("apexmarket: error: --alpha must lie in (0, 1]", file=sys.stderr)
        return EXIT_USAGE
    try:
        status, text = COMMANDS[args.command](args)
    except (DocumentError, ConfigError, AssignmentError, RegularizationError, ValueError) as exc:
        print(f"apexmarket {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if text is not None:
        if args.out and args.command != "sweep":
            _write_atomic(Path(args.out), text)
        else:
            sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
