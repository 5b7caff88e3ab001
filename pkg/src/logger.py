"""
Logging module for the cell-free simulator.
Structured JSON-lines events to a file plus human-readable console output.
"""

import json
import logging
import sys
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

LOGGER_NAME = "cellfree_sim"


def _jsonable(value: Any) -> Any:
    if hasattr(value, "item"):
        return value.item()
    if hasattr(value, "value") and isinstance(value.value, str):
        return value.value
    return value


class SimLogger:
    """Structured JSON logger for simulation runs."""

    def __init__(self, log_path: str = "logs/cellfree_sim.log", console_level: str = "INFO"):
        """
        Initialize logger with file and console handlers.

        Args:
            log_path: Path to log file (JSON lines format)
            console_level: Console logging level (DEBUG, INFO, WARNING, ERROR)
        """
        self.log_path = Path(log_path)
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

        self.console_logger = logging.getLogger(LOGGER_NAME)
        self.console_logger.setLevel(getattr(logging, console_level.upper()))

        if not self.console_logger.handlers:
            console_handler = logging.StreamHandler(sys.stdout)
            console_handler.setFormatter(
                logging.Formatter("%(asctime)s - %(levelname)s - %(message)s")
            )
            self.console_logger.addHandler(console_handler)

    def _write_json_log(self, event_data: Dict[str, Any]):
        """Write structured JSON log entry to file."""
        event_data = {key: _jsonable(value) for key, value in event_data.items()}
        event_data["timestamp"] = datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")

        line = json.dumps(event_data) + "\n"
        with self._lock, open(self.log_path, "a", encoding="utf-8") as f:
            f.write(line)

    def log_run_start(
        self, preset: Optional[str], snapshots: int, schemes, policy: str, seed: int
    ):
        """
        Log the start of an experiment run.

        Args:
            preset: Preset name, if any
            snapshots: Snapshots per sweep point
            schemes: Schemes evaluated
            policy: Power control policy
            seed: Master seed
        """
        event = {
            "event": "run_start",
            "preset": preset,
            "snapshots": snapshots,
            "schemes": [_jsonable(s) for s in schemes],
            "policy": _jsonable(policy),
            "seed": seed,
        }

        self._write_json_log(event)
        self.console_logger.info(
            f"Run {preset or 'custom'}: {snapshots} snapshots, "
            f"schemes={','.join(event['schemes'])}, policy={event['policy']}, seed={seed}"
        )

    def log_snapshot(self, index: int, sweep_label: str, min_se: Dict[str, float]):
        """
        Log a completed snapshot.

        Args:
            index: Snapshot index within the sweep point
            sweep_label: Sweep point label ("" without a sweep)
            min_se: Minimum per-user SE by scheme
        """
        event = {
            "event": "snapshot",
            "index": index,
            "sweep": sweep_label,
            "min_se": {k: round(float(v), 6) for k, v in min_se.items()},
        }

        self._write_json_log(event)
        self.console_logger.debug(f"Snapshot {index} {sweep_label}: min SE {event['min_se']}")

    def log_snapshot_failure(self, index: int, sweep_label: str, error: str):
        """Log a snapshot that was skipped because evaluation failed."""
        event = {"event": "snapshot_failure", "index": index, "sweep": sweep_label, "error": error}

        self._write_json_log(event)
        self.console_logger.error(f"Snapshot {index} {sweep_label} skipped: {error}")

    def log_bisection(self, scheme, iteration: int, nu: float, status: str, lo: float, hi: float):
        """
        Log one MMF bisection step.

        Args:
            scheme: Beamforming scheme
            iteration: Step index
            nu: Tested SINR target (linear)
            status: feasible, infeasible or undecided
            lo: Bracket lower end after the step
            hi: Bracket upper end after the step
        """
        event = {
            "event": "mmf_bisection",
            "scheme": scheme,
            "iteration": iteration,
            "nu": nu,
            "status": status,
            "lo": lo,
            "hi": hi,
        }

        self._write_json_log(event)
        self.console_logger.debug(
            f"MMF {_jsonable(scheme)} step {iteration}: nu={nu:.6g} {status} [{lo:.6g}, {hi:.6g}]"
        )

    def log_oracle_check(
        self, quantity: str, closed: float, estimate: float, z: float, passed: bool
    ):
        """Log one closed-form versus Monte Carlo comparison."""
        event = {
            "event": "oracle_check",
            "quantity": quantity,
            "closed": closed,
            "estimate": estimate,
            "z": z,
            "passed": passed,
        }

        self._write_json_log(event)
        if passed:
            self.console_logger.debug(f"Oracle {quantity}: z={z:.2f}")
        else:
            self.console_logger.warning(
                f"Oracle {quantity} FAILED: closed={closed:.6g} estimate={estimate:.6g} z={z:.2f}"
            )

    def log_outputs(self, paths: Dict[str, str], rows: int):
        """Log written result files."""
        event = {"event": "outputs", "paths": {k: str(v) for k, v in paths.items()}, "rows": rows}

        self._write_json_log(event)
        self.console_logger.info(f"Wrote {rows} CDF rows to {event['paths']}")

    def log_halt(self, reason: str):
        """
        Log experiment halt event.

        Args:
            reason: Reason for halting
        """
        event = {"event": "halt", "reason": reason}

        self._write_json_log(event)
        self.console_logger.critical(f"HALT: {reason}")

    def info(self, message: str):
        """Log info message."""
        self.console_logger.info(message)

    def warning(self, message: str):
        """Log warning message."""
        self.console_logger.warning(message)

    def error(self, message: str):
        """Log error message."""
        self.console_logger.error(message)

    def debug(self, message: str):
        """Log debug message."""
        self.console_logger.debug(message)
