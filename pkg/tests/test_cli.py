"""Command-line harness: exit codes, record schemas, config precedence, determinism."""

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from popmajority.cli import EXIT_INVALID, EXIT_OK, EXIT_TIMEOUT, build_spec, main, make_parser
from popmajority.experiment import SEED_ENV, SWEEP_COLUMNS, ExperimentSpec, SpecError, parse_ladder
from popmajority.protocols import PROTOCOLS

GOLDEN = Path(__file__).parent / "golden"


def records(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines()]


# ------------------------------------------------------------------ exit codes


def test_tied_input_is_invalid(capsys):
    assert main(["run", "--protocol", "fourstate", "--n", "10", "--a0", "5", "--b0", "5"]) == EXIT_INVALID
    assert "invalid configuration" in capsys.readouterr().err


def test_mismatched_counts_invalid():
    assert main(["run", "--protocol", "majority", "--n", "10", "--a0", "7", "--b0", "5"]) == EXIT_INVALID


def test_single_n_sweep_rejected():
    assert main(["sweep", "--protocol", "fourstate", "--n", "64"]) == EXIT_INVALID


def test_unknown_protocol_is_usage_error():
    assert main(["run", "--protocol", "plurality", "--n", "10"]) == EXIT_INVALID


def test_missing_config_file():
    assert main(["run", "--config", "/nonexistent/spec.json"]) == EXIT_INVALID


def test_fourstate_rejects_constants():
    assert main(["run", "--protocol", "fourstate", "--n", "9", "--C", "30"]) == EXIT_INVALID


def test_timeout_exit_code(capsys):
    rc = main(["run", "--protocol", "fastmajority1", "--n", "64", "--max-interactions", "50"])
    assert rc == EXIT_TIMEOUT
    assert records(capsys)[0]["outcome"] == "timeout"


def test_invariants_need_fastmajority1():
    assert main(["check-invariants", "--protocol", "majority", "--n", "64"]) == EXIT_INVALID


def test_bad_seed_env(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "banana")
    assert main(["run", "--protocol", "fourstate", "--n", "5"]) == EXIT_INVALID


# ------------------------------------------------------------------ examples


def test_fourstate_mean_matches_oracle(capsys):
    assert main(["run", "--protocol", "fourstate", "--n", "3", "--a0", "2", "--seeds", "100000",
                 "--summary-only"]) == EXIT_OK
    (summary,) = records(capsys)
    assert summary["runs"] == 100000
    assert summary["ts_interactions_mean"] == pytest.approx(4.5, rel=0.02)


def test_fastmajority1_run_example(capsys):
    assert main(["run", "--protocol", "fastmajority1", "--n", "1024", "--a0", "513", "--seeds", "1"]) == EXIT_OK
    run, summary = records(capsys)
    assert run["outcome"] == "correct-done" and run["output"] == "A"
    assert summary["outcomes"] == {"correct-done": 1}


def test_oracle_command(capsys):
    assert main(["oracle", "--n", "3", "--a0", "2"]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["expected"] == "9/2" and rec["expected_decimal"] == "4.500000000000"
    assert main(["oracle", "--n", "20", "--a0", "11"]) == EXIT_INVALID


def test_bench_broadcast_pair(capsys):
    assert main(["bench-broadcast", "--n", "2", "--runs", "50"]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["mean"] == 1.0 and rec["max"] == 1 and rec["expected"] == "1"


def test_audit_states_fourstate(capsys):
    assert main(["audit-states", "--protocol", "fourstate", "--n", "8,16,32"]) == EXIT_OK
    (rec,) = records(capsys)
    assert rec["states_seen"] == [4, 4, 4]


def test_check_invariants_small(capsys):
    assert main(["check-invariants", "--protocol", "fastmajority1", "--n", "256", "--seeds", "2"]) == EXIT_OK
    *runs, summary = records(capsys)
    assert len(runs) == 2 and summary["record"] == "summary"
    for r in runs:
        assert r["concentration"]["invariant"] == "Concentration"
        assert all(rep["invariant"] == "EpochInvariant" for rep in r["epoch_invariant"])


def test_trace_dir(tmp_path, capsys):
    assert main(["run", "--protocol", "fourstate", "--n", "6", "--a0", "4", "--seeds", "2",
                 "--trace-dir", str(tmp_path)]) == EXIT_OK
    run0 = records(capsys)[0]
    text = (tmp_path / "trace_n6_s0.csv").read_text().splitlines()
    assert len(text) == run0["trace"]["records"] == run0["interactions"]
    assert text[0].split(",")[0] == "0"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "popmajority", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("run", "sweep", "bench-broadcast", "oracle", "audit-states", "check-invariants"):
        assert cmd in out.stdout


# ------------------------------------------------------------------ schemas


def test_sweep_header_is_pinned(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--protocol", "fourstate", "--n", "8,16,32", "--seeds", "3", "--out", str(out)]) == EXIT_OK
    header = out.read_text().splitlines()[0]
    assert header + "\n" == (GOLDEN / "sweep_header.csv").read_text()
    assert tuple(header.split(",")) == SWEEP_COLUMNS


def test_run_record_keys_are_pinned(capsys):
    golden = json.loads((GOLDEN / "run_record_keys.json").read_text())
    assert main(["run", "--protocol", "fastmajority2", "--n", "64", "--seeds", "1"]) == EXIT_OK
    run, summary = records(capsys)
    assert sorted(run) == golden["run"]
    assert sorted(summary) == golden["summary"]
    assert run["schema"] == "popmajority.run/1"


# ------------------------------------------------------------------ spec and precedence


specs = st.builds(
    ExperimentSpec,
    protocol=st.sampled_from(PROTOCOLS),
    ns=st.lists(st.integers(2, 1 << 20), min_size=1, max_size=5).map(tuple),
    gap=st.none() | st.integers(1, 50),
    C=st.none() | st.floats(1, 1000, allow_nan=False),
    c=st.none() | st.floats(0.1, 100, allow_nan=False),
    extended=st.booleans(),
    seeds=st.integers(1, 10_000),
    seed_base=st.integers(0, 2 ** 64 - 1),
    max_interactions=st.none() | st.integers(1, 1 << 40),
    monitors=st.booleans(),
    output_format=st.sampled_from(["jsonl", "csv"]),
)


@given(specs)
def test_spec_text_round_trip(spec):
    text = spec.to_text()
    back = ExperimentSpec.from_text(text)
    assert back == spec and back.to_text() == text


def test_ladder_parsing():
    assert parse_ladder("1024") == (1024,)
    assert parse_ladder("64, 256,1024") == (64, 256, 1024)
    assert parse_ladder("2^10..2^13") == (1024, 2048, 4096, 8192)
    assert parse_ladder("100..700") == (128, 256, 512)
    with pytest.raises(SpecError):
        parse_ladder("5..7")
    with pytest.raises(SpecError):
        parse_ladder("")


def test_unknown_config_keys_rejected():
    with pytest.raises(SpecError):
        ExperimentSpec.from_dict({"protocol": "majority", "colour": "blue"})


def test_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps({"protocol": "majority", "ns": [256], "seeds": 7, "seed_base": 11, "C": 100}))
    parser = make_parser()
    monkeypatch.setenv(SEED_ENV, "5")

    spec = build_spec(parser.parse_args(["run", "--protocol", "fourstate", "--n", "9"]))
    assert spec.seed_base == 5  # environment beats the default

    spec = build_spec(parser.parse_args(["run", "--config", str(cfg)]))
    assert (spec.protocol, spec.ns, spec.seeds, spec.seed_base, spec.C) == ("majority", (256,), 7, 11, 100)

    spec = build_spec(parser.parse_args(["run", "--config", str(cfg), "--seeds", "2", "--seed-base", "0x10"]))
    assert (spec.seeds, spec.seed_base, spec.C) == (2, 16, 100)

    monkeypatch.delenv(SEED_ENV)
    spec = build_spec(parser.parse_args(["run", "--protocol", "fourstate", "--n", "9"]))
    assert spec.seed_base == 0


# ------------------------------------------------------------------ determinism


def sweep_bytes(tmp_path, name, *extra):
    out = tmp_path / name
    rc = main(["sweep", "--protocol", "majority", "--n", "16,32,64", "--seeds", "4", "--seed-base", "7",
               "--out", str(out), *extra])
    assert rc == EXIT_OK
    return out.read_bytes()


def test_sweep_is_byte_identical(tmp_path):
    first = sweep_bytes(tmp_path, "a.csv")
    assert first == sweep_bytes(tmp_path, "b.csv")
    assert first == sweep_bytes(tmp_path, "c.csv", "--jobs", "2")


def test_seed_base_changes_results(tmp_path):
    a = sweep_bytes(tmp_path, "a.csv")
    out = tmp_path / "other.csv"
    main(["sweep", "--protocol", "majority", "--n", "16,32,64", "--seeds", "4", "--seed-base", "8",
          "--out", str(out)])
    assert out.read_bytes() != a
