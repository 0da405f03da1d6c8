"""Command-line harness: ``run``, ``sweep``, ``bench-broadcast``, ``oracle``,
``audit-states`` and ``check-invariants``.

Exit codes: 0 success, 2 invalid configuration, 3 when any run timed out.
Per-run output is JSON lines; sweeps write CSV with a fixed column order.
"""

import argparse
import csv
import json
import os
import sys
import warnings
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from popmajority import engine
from popmajority.experiment import (
    SWEEP_COLUMNS,
    ExperimentSpec,
    SpecError,
    default_seed_base,
    monitored_run,
    parse_ladder,
    run_metrics,
    run_record,
    sweep_rows,
)
from popmajority.protocols import PROTOCOLS

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_TIMEOUT = 3

# flags that map one-to-one onto ExperimentSpec fields
_SPEC_FLAGS = ("protocol", "ns", "a0", "b0", "gap", "C", "c", "seeds", "seed_base", "max_interactions")


def _emit(out, rec: Dict[str, Any]) -> None:
    out.write(json.dumps(rec, sort_keys=True) + "\n")


def _spec_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON file with ExperimentSpec fields (flags override it)")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--n", dest="ns", type=parse_ladder, help="n or ladder: 1024 | 64,256 | 2^10..2^14")
    p.add_argument("--a0", type=int)
    p.add_argument("--b0", type=int)
    p.add_argument("--gap", type=int, help="|a0-b0| at every n (default 1 for odd n, 2 for even)")
    p.add_argument("--C", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--seeds", type=int, help="number of seeded runs per n")
    p.add_argument("--seed-base", dest="seed_base", type=lambda s: int(s, 0),
                   help="base seed (default from $POPMAJORITY_SEED_BASE, else 0)")
    p.add_argument("--max-interactions", dest="max_interactions", type=int)
    p.add_argument("--no-extended", dest="extended", action="store_false", default=None,
                   help="run the fast protocol without the four-state backup")
    p.add_argument("--jobs", type=int, default=1, help="worker processes across seeds")
    p.add_argument("--out", help="write records here instead of stdout")
    return p


def build_spec(args: argparse.Namespace, **overrides) -> ExperimentSpec:
    """Merge defaults < environment < config file < flags."""
    data: Dict[str, Any] = {"seed_base": default_seed_base()}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            data.update(json.load(fh))
    for key in _SPEC_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if getattr(args, "extended", None) is not None:
        data["extended"] = args.extended
    data.update(overrides)
    spec = ExperimentSpec.from_dict(data)
    spec.validate()
    return spec


def _open_out(args):
    if getattr(args, "out", None):
        return open(args.out, "w", newline="")
    return sys.stdout


# ------------------------------------------------------------------ commands

def cmd_run(args) -> int:
    spec = build_spec(args, **({"monitors": True} if args.monitors else {}))
    if len(spec.ns) != 1:
        raise SpecError("run takes a single n; use sweep for a ladder")
    n = spec.ns[0]
    out = _open_out(args)
    timeouts = 0
    ts: List[int] = []
    outcomes: Dict[str, int] = {}
    try:
        if spec.monitors or args.trace_dir:
            if args.trace_dir:
                os.makedirs(args.trace_dir, exist_ok=True)
            for k in range(spec.seeds):
                path = os.path.join(args.trace_dir, f"trace_n{n}_s{k}.csv") if args.trace_dir else None
                protocol, inst, m, extra = monitored_run(spec, n, k, path)
                timeouts += _account(m, ts, outcomes)
                if not args.summary_only:
                    _emit(out, run_record(spec, protocol, inst, m, extra))
        else:
            protocol = spec.protocol_for(n)
            inst = spec.instance(n)
            for m in run_metrics(spec, n, args.jobs):
                timeouts += _account(m, ts, outcomes)
                if not args.summary_only:
                    _emit(out, run_record(spec, protocol, inst, m))
        _emit(out, _summary(spec, n, ts, outcomes))
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_TIMEOUT if timeouts else EXIT_OK


def _account(m: engine.RunMetrics, ts: List[int], outcomes: Dict[str, int]) -> int:
    outcomes[m.outcome] = outcomes.get(m.outcome, 0) + 1
    if m.stabilization_interactions is not None:
        ts.append(m.stabilization_interactions)
    return int(m.outcome == engine.TIMEOUT)


def _summary(spec: ExperimentSpec, n: int, ts: Sequence[int], outcomes: Dict[str, int]) -> Dict[str, Any]:
    arr = np.asarray(ts, dtype=float)
    return {
        "schema": "popmajority.run/1",
        "record": "summary",
        "spec": json.loads(spec.to_text()),
        "n": n,
        "runs": sum(outcomes.values()),
        "outcomes": dict(sorted(outcomes.items())),
        "ts_interactions_mean": float(arr.mean()) if len(arr) else None,
        "ts_interactions_median": float(np.median(arr)) if len(arr) else None,
        "ts_parallel_mean": float(arr.mean() / n) if len(arr) else None,
    }


def cmd_sweep(args) -> int:
    spec = build_spec(args)
    if len(set(spec.ns)) < 3:
        raise SpecError("a sweep needs a ladder of at least 3 distinct n values")
    out = _open_out(args)
    timeouts = 0
    try:
        writer = csv.DictWriter(out, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row, metrics in sweep_rows(spec, jobs=args.jobs, audit=not args.no_audit):
            writer.writerow(row)
            out.flush()
            timeouts += sum(1 for m in metrics if m.outcome == engine.TIMEOUT)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_TIMEOUT if timeouts else EXIT_OK


def cmd_bench_broadcast(args) -> int:
    from popmajority.analysis.oracles import broadcast_stats

    if args.n < 2 or args.runs < 1:
        raise SpecError("need n >= 2 and runs >= 1")
    seed = args.seed if args.seed is not None else default_seed_base()
    rec = broadcast_stats(args.n, args.runs, seed).to_record()
    rec.update(schema="popmajority.broadcast/1", seed=seed)
    _emit(sys.stdout, rec)
    return EXIT_OK


def cmd_oracle(args) -> int:
    from popmajority.analysis.oracles import four_state_markov_oracle

    try:
        res = four_state_markov_oracle(args.n, args.a0)
    except ValueError as exc:
        raise SpecError(str(exc)) from exc
    rec = res.to_record()
    rec["schema"] = "popmajority.oracle/1"
    _emit(sys.stdout, rec)
    return EXIT_OK


def cmd_audit_states(args) -> int:
    from popmajority.analysis.audit import state_audit

    spec = build_spec(args)
    if len(set(spec.ns)) < 2:
        raise SpecError("an audit needs at least 2 distinct n values")
    rep = state_audit(spec.protocol, spec.ns, runs=spec.seeds, seed=spec.seed_base, gap=spec.gap,
                      extended=spec.extended, C=spec.C, c=spec.c)
    rec = rep.to_record()
    rec["schema"] = "popmajority.audit/1"
    _emit(sys.stdout, rec)
    return EXIT_OK


def cmd_check_invariants(args) -> int:
    from popmajority.analysis.invariants import check_concentration, interaction_counts

    spec = build_spec(args, monitors=True)
    if spec.protocol != "fastmajority1":
        raise SpecError("invariant checks are defined for fastmajority1")
    if len(spec.ns) != 1:
        raise SpecError("check-invariants takes a single n")
    n = spec.ns[0]
    out = _open_out(args)
    timeouts = 0
    epoch_ok = conc_ok = 0
    try:
        for k in range(spec.seeds):
            protocol, inst, m, extra = monitored_run(spec, n, k)
            timeouts += int(m.outcome == engine.TIMEOUT)
            reports = extra.get("epoch_invariant", [])
            epoch_pass = bool(reports) and all(r["passed"] for r in reports)
            params = protocol.params
            window = int(2 * params.C * n * params.lam)
            counts = interaction_counts(n, spec.seed_base, k, 0, window)
            conc = check_concentration(counts, window, n, params.c, params.lam)
            epoch_ok += epoch_pass
            conc_ok += conc.passed
            _emit(out, {"schema": "popmajority.invariants/1", "record": "run", "stream": k,
                        "outcome": m.outcome, "epoch_invariant_passed": epoch_pass,
                        "epoch_invariant": reports, "concentration": conc.to_record()})
        _emit(out, {"schema": "popmajority.invariants/1", "record": "summary", "n": n, "runs": spec.seeds,
                    "epoch_invariant_pass_rate": epoch_ok / spec.seeds,
                    "concentration_pass_rate": conc_ok / spec.seeds})
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_TIMEOUT if timeouts else EXIT_OK


# ------------------------------------------------------------------ entry

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="popmajority", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _spec_parser()

    p = sub.add_parser("run", parents=[common], help="seeded runs at one n, JSON lines")
    p.add_argument("--monitors", action="store_true", help="check the epoch invariant during runs")
    p.add_argument("--trace-dir", help="write one per-interaction trace file per run")
    p.add_argument("--summary-only", action="store_true", help="print only the summary record")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="aggregate CSV rows over an n ladder")
    p.add_argument("--no-audit", action="store_true", help="leave states_seen empty")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-broadcast", help="single-source epidemic statistics")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--seed", type=lambda s: int(s, 0))
    p.set_defaults(func=cmd_bench_broadcast)

    p = sub.add_parser("oracle", help="exact four-state absorption time")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--a0", type=int, required=True)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("audit-states", parents=[common], help="distinct states over an n ladder")
    p.set_defaults(func=cmd_audit_states)

    p = sub.add_parser("check-invariants", parents=[common], help="epoch invariant and concentration pass rates")
    p.set_defaults(func=cmd_check_invariants)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which matches the invalid-config code
        return int(exc.code) if exc.code is not None else EXIT_INVALID
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return args.func(args)
    except (SpecError, engine.InvalidInstance) as exc:
        print(f"popmajority: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"popmajority: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
