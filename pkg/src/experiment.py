"""
Experiment orchestration: snapshots, power allocation, closed-form evaluation,
CDF aggregation and the optional oracle subsample pass.
"""

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .closedform import evaluate, hardening_metrics, maximal_ratio_power
from .exceptions import HaltError, PowerConstraintError, ScenarioError, SolverError
from .logger import SimLogger
from .mmf import solve_mmf
from .models import (
    CdfRow,
    CdfTable,
    ExperimentSpec,
    PowerAllocation,
    PowerPolicy,
    Scheme,
    Snapshot,
    SystemConfig,
)
from .oracle import DEFAULT_BATCH, cbdt_closed_forms, check_instance, compare, estimate_cbdt
from .scenario import build_snapshot, restrict_snapshot

logger = logging.getLogger("cellfree_sim")

PER_USER_METRICS = ("se", "gross_se", "sinr_db", "bu_ds_db", "ui_ds_db")
SNAPSHOT_FAILURES = (ScenarioError, SolverError, PowerConstraintError, ValueError)


@dataclass
class SnapshotResult:
    """Metrics of one snapshot at one sweep point."""

    label: str
    index: int
    per_user: Dict[Scheme, Dict[str, np.ndarray]] = field(default_factory=dict)
    min_se: Dict[Scheme, float] = field(default_factory=dict)
    error: Optional[str] = None


@dataclass
class ExperimentResult:
    table: CdfTable
    summary: Dict[str, Any]
    failures: int = 0
    oracle_failures: List[str] = field(default_factory=list)


def snapshot_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Seed of snapshot `index`; identical at every sweep point."""
    return np.random.SeedSequence(seed, spawn_key=(index,))


def sweep_points(spec: ExperimentSpec) -> List[Tuple[str, SystemConfig]]:
    if spec.sweep is None:
        return [("", spec.system)]
    name = spec.sweep[0]
    return [(f"{name}={getattr(cfg, name)}", cfg) for cfg in spec.systems()]


def metric_tag(metric: str, label: str) -> str:
    return f"{metric}@{label}" if label else metric


def allocate(
    snapshot: Snapshot,
    scheme: Scheme,
    spec: ExperimentSpec,
    config: SystemConfig,
    sim_logger: Optional[SimLogger] = None,
) -> PowerAllocation:
    """Power coefficients of one scheme under the configured power policy."""
    if spec.power_policy is PowerPolicy.MMF:
        solution = solve_mmf(
            snapshot,
            scheme,
            config,
            bisect_tol=float(spec.mmf.get("bisect_tol", 1e-3)),
            feas_tol=float(spec.mmf.get("feas_tol", 1e-6)),
            backend=spec.mmf.get("backend"),
            sim_logger=sim_logger,
            max_steps=int(spec.mmf.get("max_steps", 200)),
        )
        return solution.allocation()
    # CBDT shares the CB power constraint
    alloc_scheme = Scheme.CB if scheme is Scheme.CBDT else scheme
    eta = maximal_ratio_power(snapshot, alloc_scheme, full_sum=config.mr_full_sum).eta
    return PowerAllocation(eta, scheme)


def run_snapshot(
    spec: ExperimentSpec,
    config: SystemConfig,
    label: str,
    index: int,
    sim_logger: Optional[SimLogger] = None,
) -> SnapshotResult:
    """
    Build one snapshot and evaluate every scheme on it.

    Failures are caught and reported on the result so one bad snapshot does not
    stop the run.
    """
    result = SnapshotResult(label=label, index=index)
    try:
        snapshot = build_snapshot(config, snapshot_seed(config.seed, index))
        for scheme in spec.schemes:
            allocation = allocate(snapshot, scheme, spec, config, sim_logger)
            report = evaluate(snapshot, allocation.eta, scheme, config)
            bu_ds, ui_ds = hardening_metrics(report)
            with np.errstate(divide="ignore"):
                sinr_db = 10.0 * np.log10(report.sinr)
            result.per_user[scheme] = {
                "se": report.se,
                "gross_se": report.gross_se,
                "sinr_db": sinr_db,
                "bu_ds_db": bu_ds,
                "ui_ds_db": ui_ds,
            }
            result.min_se[scheme] = report.min_se
    except SNAPSHOT_FAILURES as e:
        result.error = f"{type(e).__name__}: {e}"
        result.per_user.clear()
        result.min_se.clear()
        if sim_logger is not None:
            sim_logger.log_snapshot_failure(index, label, result.error)
        return result

    if sim_logger is not None:
        sim_logger.log_snapshot(index, label, {s.value: v for s, v in result.min_se.items()})
    return result


def empirical_cdf(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted finite-or-infinite values with probabilities i/n; NaNs are dropped."""
    values = np.asarray(values, dtype=float).ravel()
    values = np.sort(values[~np.isnan(values)], kind="stable")
    n = values.size
    return values, np.arange(1, n + 1) / n if n else np.empty(0)


def build_table(
    results: List[SnapshotResult], spec: ExperimentSpec, metadata: Dict[str, Any]
) -> CdfTable:
    """
    Pool per-user metrics over (snapshot, user) pairs and min-SE over snapshots.

    Rows come out grouped by scheme, then metric, then sweep point.
    """
    labels = [label for label, _ in sweep_points(spec)]
    rows: List[CdfRow] = []
    for scheme in spec.schemes:
        for metric in PER_USER_METRICS + ("min_se",):
            for label in labels:
                chunks = [
                    np.atleast_1d(
                        r.min_se[scheme] if metric == "min_se" else r.per_user[scheme][metric]
                    )
                    for r in results
                    if r.label == label and r.error is None
                ]
                if not chunks:
                    continue
                values, probs = empirical_cdf(np.concatenate(chunks))
                tag = metric_tag(metric, label)
                rows.extend(
                    CdfRow(scheme.value, tag, float(v), float(p)) for v, p in zip(values, probs)
                )
    return CdfTable(rows=rows, metadata=metadata)


def summarize(table: CdfTable) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Count, mean and 5/50/95th percentiles per (scheme, metric) over finite values."""
    out: Dict[str, Dict[str, Dict[str, float]]] = {}
    for (scheme, metric), values in table.groups().items():
        finite = values[np.isfinite(values)]
        stats: Dict[str, float] = {"count": int(finite.size)}
        if finite.size:
            p5, p50, p95 = np.percentile(finite, [5, 50, 95])
            stats.update(mean=float(finite.mean()), p5=float(p5), p50=float(p50), p95=float(p95))
        out.setdefault(scheme, {})[metric] = stats
    return out


def config_hash(spec: ExperimentSpec) -> str:
    """Short stable digest of everything that determines the results."""
    payload = dataclasses.asdict(spec)
    payload.pop("outputs", None)
    payload.pop("workers", None)
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def oracle_subsample(
    snapshot: Snapshot, config: SystemConfig, users: int, aps: int
) -> Tuple[Snapshot, SystemConfig]:
    """First `users` users served by the `aps` APs strongest for them."""
    users = min(users, snapshot.K)
    aps = min(aps, snapshot.M)
    user_idx = np.arange(users)
    strength = snapshot.beta[:, user_idx].sum(axis=1)
    ap_idx = np.sort(np.argsort(-strength, kind="stable")[:aps])
    sub_config = replace(config, M=aps, K=users, cluster_min=min(config.cluster_min, aps))
    return restrict_snapshot(snapshot, ap_idx, user_idx, sub_config), sub_config


def oracle_pass(
    spec: ExperimentSpec, sim_logger: Optional[SimLogger] = None
) -> Tuple[int, List[str]]:
    """
    Check the closed forms against Monte Carlo on reduced snapshots.

    Returns:
        (number of comparisons, failed comparison labels)
    """
    opts = spec.oracle or {}
    trials = int(opts.get("trials", 100_000))
    z_threshold = float(opts.get("z_threshold", 4.0))
    batch_size = int(opts.get("batch_size", DEFAULT_BATCH))
    config = spec.systems()[0]
    checks, failures = 0, []

    for index in range(int(opts.get("snapshots", 1))):
        snapshot = build_snapshot(config, snapshot_seed(config.seed, index))
        sub, sub_config = oracle_subsample(
            snapshot, config, int(opts.get("users", 3)), int(opts.get("aps", 4))
        )
        oracle_seed = np.random.SeedSequence(config.seed, spawn_key=(index, 1))
        streams = iter(oracle_seed.spawn(len(spec.schemes)))
        for scheme in spec.schemes:
            stream = next(streams)
            if scheme is Scheme.CBDT:
                failures += _check_cbdt(
                    sub, sub_config, trials, stream, z_threshold, sim_logger, batch_size
                )
                checks += 3
            else:
                failures += check_instance(
                    sub,
                    sub_config,
                    scheme,
                    trials,
                    stream,
                    z_threshold,
                    sim_logger,
                    f"#{index}.",
                    batch_size,
                )
                checks += 3
    return checks, failures


def _check_cbdt(
    snapshot, config, trials, seed, z_threshold, sim_logger, batch_size=DEFAULT_BATCH
) -> List[str]:
    eta = maximal_ratio_power(snapshot, Scheme.CB).eta
    closed = cbdt_closed_forms(snapshot, eta, config)
    mc = estimate_cbdt(snapshot, eta, config, trials=trials, seed=seed, batch_size=batch_size)
    failures = []
    for name in ("kappa", "error_power", "pair_power"):
        result = compare(closed[name], getattr(mc, name), z_threshold)
        if sim_logger is not None:
            sim_logger.log_oracle_check(
                f"CBDT.{name}",
                float(np.sum(closed[name])),
                float(np.sum(getattr(mc, name).estimate)),
                result.worst,
                result.passed,
            )
        if not result.passed:
            failures.append(f"CBDT.{name} (worst z={result.worst:.2f})")
    return failures


def run_experiment(
    spec: ExperimentSpec, sim_logger: Optional[SimLogger] = None
) -> ExperimentResult:
    """
    Run every snapshot at every sweep point and aggregate the CDF table.

    Args:
        spec: Validated experiment spec
        sim_logger: Structured event logger

    Returns:
        ExperimentResult with the table, summary and failure counts

    Raises:
        HaltError: If no snapshot could be evaluated
    """
    if sim_logger is not None:
        sim_logger.log_run_start(
            spec.preset,
            spec.snapshots,
            [s.value for s in spec.schemes],
            spec.power_policy.value,
            spec.system.seed,
        )

    tasks = [
        (config, label, index)
        for label, config in sweep_points(spec)
        for index in range(spec.snapshots)
    ]

    def work(task):
        config, label, index = task
        return run_snapshot(spec, config, label, index, sim_logger)

    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(task) for task in tasks]

    failures = sum(r.error is not None for r in results)
    if failures == len(results):
        reason = results[0].error if results else "no snapshots"
        if sim_logger is not None:
            sim_logger.log_halt(reason)
        raise HaltError(f"all {len(results)} snapshots failed", reason=reason)
    if failures:
        logger.warning(f"{failures} of {len(results)} snapshots failed and were skipped")

    oracle_checks, oracle_failures = 0, []
    if spec.oracle is not None:
        oracle_checks, oracle_failures = oracle_pass(spec, sim_logger)

    metadata = {
        "config_hash": config_hash(spec),
        "seed": spec.system.seed,
        "version": __version__,
        "preset": spec.preset,
        "snapshots": spec.snapshots,
        "power_policy": spec.power_policy.value,
        "failures": failures,
    }
    if spec.oracle is not None:
        metadata["oracle_checks"] = oracle_checks
        metadata["oracle_failures"] = len(oracle_failures)
    table = build_table(results, spec, metadata)
    summary = {"metadata": metadata, "metrics": summarize(table)}
    return ExperimentResult(table, summary, failures, oracle_failures)
