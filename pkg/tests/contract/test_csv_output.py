"""
Contract test: Layout of the result files consumed by plotting scripts.

cdf.csv has the header scheme,metric,value,cdf; rows are grouped by
(scheme, metric), sorted by value within a group, and each group's last cdf is 1.
summary.yaml holds metadata and metrics and no wall-clock timestamp.
"""

import csv

import pytest
import yaml

from src.experiment import run_experiment
from src.storage import emit_outputs


@pytest.fixture
def written(test_config):
    spec = test_config.spec
    result = run_experiment(spec)
    return emit_outputs(result.table, result.summary, spec.outputs)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def test_csv_header(written):
    assert _rows(written["csv"])[0] == ["scheme", "metric", "value", "cdf"]


def test_groups_are_contiguous_sorted_and_complete(written):
    rows = _rows(written["csv"])[1:]
    seen, current = set(), None
    previous_value, previous_cdf = None, None

    for scheme, metric, value, cdf in rows:
        key = (scheme, metric)
        if key != current:
            assert key not in seen, f"group {key} appears twice"
            if current is not None:
                assert previous_cdf == 1.0
            seen.add(key)
            current, previous_value = key, None
        value, cdf = float(value), float(cdf)
        assert 0.0 < cdf <= 1.0
        if previous_value is not None:
            assert value >= previous_value
        previous_value, previous_cdf = value, cdf

    assert previous_cdf == 1.0
    assert {scheme for scheme, _ in seen} == {"CB", "NCB", "ECB", "CBDT"}


def test_csv_ends_with_newline_and_uses_no_quotes(written):
    text = written["csv"].read_text()
    assert text.endswith("\n")
    assert '"' not in text
    assert "\r" not in text


def test_summary_metadata(written):
    summary = yaml.safe_load(written["summary"].read_text())

    assert list(summary) == ["metadata", "metrics"]
    metadata = summary["metadata"]
    for key in ("config_hash", "seed", "version", "snapshots", "power_policy", "failures"):
        assert key in metadata
    assert not any("time" in key for key in metadata)

    stats = summary["metrics"]["ECB"]["se"]
    assert set(stats) == {"count", "mean", "p5", "p50", "p95"}
    assert stats["p5"] <= stats["p50"] <= stats["p95"]
