"""
Result storage: CDF tables as CSV and run summaries as YAML.

Files are written to a temporary sibling and moved into place, so a reader never
sees a half-written result. Result files carry no timestamps.
"""

import csv
import io
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .exceptions import OutputError
from .logger import SimLogger
from .models import CdfRow, CdfTable

CSV_HEADER = ("scheme", "metric", "value", "cdf")


def format_float(value: float) -> str:
    """Nine significant digits; infinities as inf / -inf."""
    return f"{value:.9g}"


class ResultStorage:
    """Writer and reader for experiment result files."""

    def __init__(self, logger: Optional[SimLogger] = None):
        self.logger = logger

    def _atomic_write(self, path: Path, text: str):
        tmp = path.with_name(path.name + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "w", encoding="utf-8", newline="") as f:
                f.write(text)
            os.replace(tmp, path)
        except OSError as e:
            try:
                tmp.unlink()
            except OSError:
                pass
            raise OutputError(f"cannot write {path}: {e}", str(path)) from e

    def render_csv(self, table: CdfTable) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in table.rows:
            writer.writerow(
                (row.scheme, row.metric, format_float(row.value), format_float(row.cdf))
            )
        return buffer.getvalue()

    def write_csv(self, table: CdfTable, path: str) -> Path:
        """
        Write the CDF table with header `scheme,metric,value,cdf`.

        Args:
            table: Validated CDF table (may be empty)
            path: Destination file

        Returns:
            Path written

        Raises:
            OutputError: If the path is not writable
        """
        path = Path(path)
        self._atomic_write(path, self.render_csv(table))
        if self.logger:
            self.logger.debug(f"CSV written: {path} ({len(table.rows)} rows)")
        return path

    def read_csv(self, path: str) -> CdfTable:
        """Parse a CSV written by write_csv back into a CdfTable."""
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8", newline="") as f:
                reader = csv.reader(f)
                header = next(reader, None)
                if tuple(header or ()) != CSV_HEADER:
                    raise OutputError(f"unexpected CSV header {header}", str(path))
                rows = [CdfRow(s, m, float(v), float(c)) for s, m, v, c in reader]
        except OSError as e:
            raise OutputError(f"cannot read {path}: {e}", str(path)) from e
        return CdfTable(rows=rows)

    def write_summary(self, summary: Dict[str, Any], path: str) -> Path:
        """Write the run summary (metadata plus per-metric statistics) as YAML."""
        path = Path(path)
        self._atomic_write(path, yaml.safe_dump(summary, sort_keys=False))
        return path


def emit_outputs(
    table: CdfTable,
    summary: Dict[str, Any],
    paths: Dict[str, str],
    logger: Optional[SimLogger] = None,
) -> Dict[str, Path]:
    """
    Write every configured output file.

    Args:
        table: CDF table
        summary: Summary mapping from run_experiment
        paths: Output paths keyed by 'csv' and 'summary' (either may be absent)
        logger: Receives an outputs event

    Returns:
        Written paths by kind
    """
    storage = ResultStorage(logger)
    written: Dict[str, Path] = {}
    if paths.get("csv"):
        written["csv"] = storage.write_csv(table, paths["csv"])
    if paths.get("summary"):
        written["summary"] = storage.write_summary(summary, paths["summary"])
    if logger:
        logger.log_outputs({k: str(v) for k, v in written.items()}, len(table.rows))
    return written
