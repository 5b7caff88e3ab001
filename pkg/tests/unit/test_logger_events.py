"""
Unit test: Structured run events.
Tests the JSON-lines records written by SimLogger.
"""

import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from src.logger import SimLogger
from src.models import PowerPolicy, Scheme


def _entries(log_file):
    with open(log_file, "r") as f:
        return [json.loads(line) for line in f]


def test_log_run_start_creates_json_entry(tmp_path):
    """
    Test that log_run_start() writes a parseable entry with enums as plain strings.
    """
    log_file = tmp_path / "test.log"
    logger = SimLogger(str(log_file))

    logger.log_run_start(
        preset="fig4",
        snapshots=200,
        schemes=[Scheme.CB, Scheme.ECB],
        policy=PowerPolicy.MAXIMAL_RATIO,
        seed=np.int64(3),
    )

    assert log_file.exists(), "Log file not created"
    entry = _entries(log_file)[0]

    assert entry["event"] == "run_start"
    assert entry["preset"] == "fig4"
    assert entry["schemes"] == ["CB", "ECB"]
    assert entry["policy"] == "maximal_ratio"
    assert entry["seed"] == 3


def test_entries_include_utc_timestamp(tmp_path):
    log_file = tmp_path / "test.log"
    logger = SimLogger(str(log_file))

    logger.log_halt("every snapshot failed")

    entry = _entries(log_file)[0]
    assert entry["event"] == "halt"
    assert "T" in entry["timestamp"], "Timestamp should be ISO format"
    assert entry["timestamp"].endswith("Z"), "Timestamp should be UTC (end with Z)"


def test_log_snapshot_rounds_min_se(tmp_path):
    log_file = tmp_path / "test.log"
    logger = SimLogger(str(log_file))

    logger.log_snapshot(4, "N=8", {"CB": np.float64(1.23456789), "NCB": 0.5})

    entry = _entries(log_file)[0]
    assert entry["index"] == 4
    assert entry["sweep"] == "N=8"
    assert entry["min_se"] == {"CB": 1.234568, "NCB": 0.5}


def test_log_bisection_and_oracle_check(tmp_path):
    log_file = tmp_path / "test.log"
    logger = SimLogger(str(log_file))

    logger.log_bisection(Scheme.NCB, 1, 2.5, "feasible", 2.5, 4.0)
    logger.log_oracle_check("CB.coherent_gain[0]", 1.0, np.float64(1.01), 0.8, True)
    logger.log_snapshot_failure(2, "", "SolverError: bad data")

    step, check, failure = _entries(log_file)
    assert step["event"] == "mmf_bisection"
    assert step["scheme"] == "NCB"
    assert (step["lo"], step["hi"]) == (2.5, 4.0)
    assert check["event"] == "oracle_check"
    assert check["estimate"] == 1.01
    assert check["passed"] is True
    assert failure["event"] == "snapshot_failure"
    assert failure["error"] == "SolverError: bad data"


def test_log_outputs(tmp_path):
    log_file = tmp_path / "test.log"
    logger = SimLogger(str(log_file))

    logger.log_outputs({"csv": tmp_path / "cdf.csv"}, rows=12)

    entry = _entries(log_file)[0]
    assert entry["rows"] == 12
    assert entry["paths"]["csv"].endswith("cdf.csv")


def test_concurrent_writes_keep_lines_intact(tmp_path):
    """Worker threads logging at once never interleave within a line."""
    log_file = tmp_path / "test.log"
    logger = SimLogger(str(log_file))

    with ThreadPoolExecutor(max_workers=4) as pool:
        list(pool.map(lambda i: logger.log_snapshot(i, "", {"CB": 1.0}), range(200)))

    entries = _entries(log_file)
    assert len(entries) == 200
    assert sorted(e["index"] for e in entries) == list(range(200))


def test_log_directory_is_created(tmp_path):
    log_file = tmp_path / "nested" / "logs" / "run.log"
    SimLogger(str(log_file)).log_halt("stop")
    assert log_file.exists()
