"""Experiment specifications and the run/sweep drivers behind the CLI.

Seeding rule: run ``k`` of a spec uses stream ``k`` of ``seed_base`` at every
``n``, so adding seeds only appends runs and a sweep row for ``n`` never
depends on the other ladder entries.
"""

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from popmajority import engine
from popmajority.protocols import PROTOCOLS, make_protocol

RUN_SCHEMA = "popmajority.run/1"
SWEEP_SCHEMA = "popmajority.sweep/1"
SWEEP_COLUMNS = (
    "protocol", "n", "a0", "b0", "C", "c", "seeds", "ts_median", "ts_mean", "ts_p99",
    "tc_median", "fail_rate", "oos_max", "states_seen",
)
SEED_ENV = "POPMAJORITY_SEED_BASE"


class SpecError(ValueError):
    """An experiment specification that cannot be run."""


def parse_ladder(text: str) -> Tuple[int, ...]:
    """``"1024"``, ``"64,256,1024"`` or ``"2^10..2^14"`` (every power of two in range)."""
    out: List[int] = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        if ".." in item:
            lo, hi = (_int(x) for x in item.split("..", 1))
            if lo < 1 or hi < lo:
                raise SpecError(f"bad range {item!r}")
            k = 1
            while k <= hi:
                if k >= lo:
                    out.append(k)
                k *= 2
            if not any(lo <= v <= hi for v in out):
                raise SpecError(f"range {item!r} holds no power of two")
        else:
            out.append(_int(item))
    if not out:
        raise SpecError("empty n ladder")
    return tuple(out)


def _int(text: str) -> int:
    text = text.strip()
    if "^" in text:
        base, exp = text.split("^", 1)
        return int(base) ** int(exp)
    return int(text)


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce a batch of runs.

    ``a0``/``b0`` fix the split for a single ``n``; otherwise ``gap`` sets
    ``|a0 - b0|`` at every ladder entry (default: 1 for odd ``n``, 2 for even).
    """

    protocol: str = "fastmajority1"
    ns: Tuple[int, ...] = (1024,)
    a0: Optional[int] = None
    b0: Optional[int] = None
    gap: Optional[int] = None
    C: Optional[float] = None
    c: Optional[float] = None
    extended: bool = True
    seeds: int = 1
    seed_base: int = 0
    max_interactions: Optional[int] = None
    monitors: bool = False
    output_format: str = "jsonl"

    def __post_init__(self):
        self.ns = tuple(int(x) for x in self.ns)

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise SpecError(f"unknown protocol {self.protocol!r}")
        if not self.ns or any(n < 2 for n in self.ns):
            raise SpecError("every n must be at least 2")
        if self.seeds < 1:
            raise SpecError("seeds must be positive")
        if not 0 <= self.seed_base < 2 ** 64:
            raise SpecError("seed_base must be a 64-bit unsigned integer")
        if self.max_interactions is not None and self.max_interactions <= 0:
            raise SpecError("max_interactions must be positive")
        if self.protocol == "fourstate" and (self.C is not None or self.c is not None):
            raise SpecError("fourstate takes no C/c parameters")
        if self.output_format not in ("jsonl", "csv"):
            raise SpecError(f"unknown output format {self.output_format!r}")
        for n in self.ns:
            self.instance(n)

    def instance(self, n: int) -> engine.InputInstance:
        if self.a0 is not None or self.b0 is not None:
            if len(self.ns) != 1:
                raise SpecError("a0/b0 need a single n; use gap with a ladder")
            a0 = self.a0 if self.a0 is not None else n - self.b0
            b0 = self.b0 if self.b0 is not None else n - a0
        else:
            g = self.gap if self.gap is not None else (1 if n % 2 else 2)
            if g < 1 or g > n or (n - g) % 2:
                raise SpecError(f"gap {g} impossible at n={n}")
            a0, b0 = (n + g) // 2, (n - g) // 2
        try:
            return engine.InputInstance(n, a0, b0)
        except ValueError as exc:
            raise SpecError(str(exc)) from exc

    def protocol_for(self, n: int):
        return make_protocol(self.protocol, n, extended=self.extended, C=self.C, c=self.c)

    # the textual form is canonical JSON: sorted keys, lists for tuples
    def to_text(self) -> str:
        d = asdict(self)
        d["ns"] = list(self.ns)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        d = dict(d)
        if "ns" in d:
            ns = d["ns"]
            d["ns"] = parse_ladder(ns) if isinstance(ns, str) else tuple(ns)
        return cls(**d)


def default_seed_base() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw, 0)
    except ValueError as exc:
        raise SpecError(f"{SEED_ENV}={raw!r} is not an integer") from exc


# ------------------------------------------------------------------ runs

def _majority_letter(inst: engine.InputInstance, m: engine.RunMetrics) -> Optional[str]:
    maj = "A" if inst.a0 > inst.b0 else "B"
    if m.outcome == engine.TIMEOUT:
        return None
    if m.outcome == engine.INCORRECT:
        return "B" if maj == "A" else "A"
    return maj


def run_record(spec: ExperimentSpec, protocol, inst: engine.InputInstance, m: engine.RunMetrics,
               extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    rec: Dict[str, Any] = {"schema": RUN_SCHEMA, "record": "run", "protocol": spec.protocol,
                           "extended": protocol.extended}
    rec.update(_param_columns(protocol))
    rec.update(m.to_record())
    rec["output"] = _majority_letter(inst, m)
    if extra:
        rec.update(extra)
    return rec


def _param_columns(protocol) -> Dict[str, Any]:
    params = protocol.params
    return {"C": getattr(params, "C", None), "c": getattr(params, "c", None)}


def _chunk_runs(args):
    spec_text, n, streams = args
    spec = ExperimentSpec.from_text(spec_text)
    protocol = spec.protocol_for(n)
    return engine.run_many(protocol, spec.instance(n), seed=spec.seed_base, streams=streams,
                           max_interactions=spec.max_interactions)


def run_metrics(spec: ExperimentSpec, n: int, jobs: int = 1) -> List[engine.RunMetrics]:
    """All seeded runs at ``n``, in stream order whatever ``jobs`` is."""
    streams = list(range(spec.seeds))
    if jobs <= 1 or len(streams) < 2:
        return _chunk_runs((spec.to_text(), n, streams))
    size = math.ceil(len(streams) / jobs)
    chunks = [streams[k:k + size] for k in range(0, len(streams), size)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_chunk_runs, [(spec.to_text(), n, ch) for ch in chunks]))
    return [m for part in parts for m in part]


def monitored_run(spec: ExperimentSpec, n: int, stream: int, trace_path: Optional[str] = None):
    """One run with the invariant monitors (FastMajority1 only) and an optional trace file."""
    from popmajority.analysis.invariants import EpochStartMonitor

    protocol = spec.protocol_for(n)
    inst = spec.instance(n)
    monitor = None
    if spec.monitors and protocol.name == "fastmajority1":
        monitor = EpochStartMonitor(protocol)
    _, m, tr = engine.run(protocol, inst, seed=spec.seed_base, stream=stream,
                          max_interactions=spec.max_interactions, trace=trace_path is not None,
                          trace_limit=10_000_000, monitor=monitor)
    extra: Dict[str, Any] = {}
    if monitor is not None:
        extra["epoch_invariant"] = [r.to_record() for r in monitor.reports]
    if tr is not None:
        tr.write(trace_path, protocol)
        extra["trace"] = {"path": os.path.basename(trace_path), "records": len(tr),
                          "truncated": tr.truncated}
    return protocol, inst, m, extra


# ------------------------------------------------------------------ sweeps

def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


def sweep_row(spec: ExperimentSpec, n: int, metrics: Sequence[engine.RunMetrics],
              states_seen: Optional[int]) -> Dict[str, str]:
    protocol = spec.protocol_for(n)
    inst = spec.instance(n)
    ts = np.array([m.stabilization_interactions / n for m in metrics
                   if m.stabilization_interactions is not None], dtype=float)
    tc = np.array([m.convergence_interactions / n for m in metrics
                   if m.convergence_interactions is not None], dtype=float)
    fails = sum(1 for m in metrics if m.outcome == engine.ALL_FAIL_BACKUP)
    params = _param_columns(protocol)
    return {
        "protocol": spec.protocol,
        "n": str(n),
        "a0": str(inst.a0),
        "b0": str(inst.b0),
        "C": "" if params["C"] is None else f"{params['C']:g}",
        "c": "" if params["c"] is None else f"{params['c']:.6g}",
        "seeds": str(len(metrics)),
        "ts_median": _fmt(float(np.median(ts)) if len(ts) else None),
        "ts_mean": _fmt(float(ts.mean()) if len(ts) else None),
        "ts_p99": _fmt(float(np.percentile(ts, 99)) if len(ts) else None),
        "tc_median": _fmt(float(np.median(tc)) if len(tc) else None),
        "fail_rate": _fmt(fails / len(metrics)),
        "oos_max": str(max(m.oos_max for m in metrics)),
        "states_seen": "" if states_seen is None else str(states_seen),
    }


def audit_count(spec: ExperimentSpec, n: int) -> int:
    """Distinct fast-component states observed in the first seeded run at ``n``."""
    from popmajority.analysis.audit import fast_components, observed_states

    protocol = spec.protocol_for(n)
    seen, _ = observed_states(protocol, spec.instance(n), seed=spec.seed_base, stream=0,
                              max_interactions=spec.max_interactions)
    return len(fast_components(protocol, seen))


def sweep_rows(spec: ExperimentSpec, jobs: int = 1, audit: bool = True) -> Iterable[Tuple[Dict[str, str], List[engine.RunMetrics]]]:
    for n in spec.ns:
        metrics = run_metrics(spec, n, jobs)
        yield sweep_row(spec, n, metrics, audit_count(spec, n) if audit else None), metrics
