"""
Max-min fairness power control.

For a fixed SINR target nu every user's constraint SINR_k >= nu is a second-order
cone in u = sqrt(rho_d * eta), and the per-AP power budgets are norm balls. The
optimal nu is found by bisection over cvxpy feasibility problems.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Union

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from .closedform import (
    _require_ecb_antennas,
    alpha,
    evaluate,
    maximal_ratio_power,
    power_constraint_load,
    varrho,
    vartheta,
)
from .exceptions import ConfigError, SolverError
from .logger import SimLogger
from .models import (
    MmfAudit,
    MmfSolution,
    PowerAllocation,
    Scheme,
    Snapshot,
    SocProblem,
    SystemConfig,
)

logger = logging.getLogger("cellfree_sim")

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
UNDECIDED = "undecided"

DEFAULT_FEAS_TOL = 1e-6
DEFAULT_BISECT_TOL = 1e-3


def build_soc_problem(snapshot: Snapshot, scheme: Scheme, config: SystemConfig) -> SocProblem:
    """
    Second-order cone data of the MMF epigraph problem.

    Args:
        snapshot: Network realization
        scheme: CB, NCB or ECB (CB follows the same template and is an extension)
        config: Provides rho_d

    Returns:
        SocProblem whose cones encode SINR_k >= nu and the per-AP constraints
    """
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.CBDT:
        raise ConfigError(
            "MMF power control is not available for CBDT", key="experiment.power_policy"
        )

    N = snapshot.antennas
    beta, gamma = snapshot.beta, snapshot.gamma
    overlap = snapshot.ul_overlap
    rho = config.rho_d
    ratio = beta[:, :, None] / beta[:, None, :]  # [m, k, j] = beta_mk / beta_mj

    if scheme is Scheme.NCB:
        a = alpha(N)
        signal = a * np.sqrt(gamma).T
        cross = a * overlap[:, :, None] * np.sqrt(gamma).T[:, None, :]
        noncoherent = np.sqrt(vartheta(snapshot)).transpose(1, 2, 0)
        budget_weights = np.ones_like(gamma)
        budget_bound = np.sqrt(rho)
    elif scheme is Scheme.ECB:
        _require_ecb_antennas(N)
        signal = np.ones_like(gamma.T)
        cross = overlap[:, :, None] * ratio.transpose(1, 2, 0)
        noncoherent = np.sqrt(np.maximum(varrho(snapshot), 0.0)).transpose(1, 2, 0)
        budget_weights = 1.0 / np.sqrt(gamma)
        budget_bound = np.sqrt(rho * (N - 1))
    else:
        signal = N * gamma.T
        cross = N * overlap[:, :, None] * (gamma[:, None, :] * ratio).transpose(1, 2, 0)
        noncoherent = np.sqrt(N * beta[:, :, None] * gamma[:, None, :]).transpose(1, 2, 0)
        budget_weights = np.sqrt(N * gamma)
        budget_bound = np.sqrt(rho)

    idx = np.arange(snapshot.K)
    cross[idx, idx, :] = 0.0

    return SocProblem(
        scheme=scheme,
        rho_d=rho,
        signal=signal,
        cross=cross,
        noncoherent=noncoherent,
        budget_weights=budget_weights,
        budget_bound=float(budget_bound),
        support=snapshot.cluster_mask,
        mr_eta=maximal_ratio_power(snapshot, scheme, full_sum=config.mr_full_sum).eta,
    )


def soc_sinr(problem: SocProblem, eta: np.ndarray) -> np.ndarray:
    """Per-user SINR implied by the cone data at power coefficients eta."""
    u = np.sqrt(problem.rho_d * np.asarray(eta, dtype=float))
    useful = np.einsum("km,mk->k", problem.signal, u) ** 2
    coherent = np.einsum("kjm,mj->kj", problem.cross, u) ** 2
    noncoherent = np.einsum("kjm,mj->k", problem.noncoherent**2, u**2)
    return useful / (coherent.sum(axis=1) + noncoherent + 1.0)


def soc_load(problem: SocProblem, eta: np.ndarray) -> np.ndarray:
    """Per-AP budget usage ||w_m * u_m||^2 / bound^2 (<= 1 when feasible)."""
    u2 = problem.rho_d * np.asarray(eta, dtype=float)
    return np.sum(problem.budget_weights**2 * u2, axis=1) / problem.budget_bound**2


def single_user_sinr_bound(problem: SocProblem) -> np.ndarray:
    """
    Upper bound on each user's SINR under any feasible allocation.

    Dropping the other users leaves (a.u)^2 / (sum b u^2 + 1), which is bounded
    both by (a.u_max)^2 and by sum a^2 / b (Cauchy-Schwarz).
    """
    bounds = np.empty(problem.K)
    for k in range(problem.K):
        on = problem.support[:, k]
        a = problem.signal[k, on]
        b = problem.noncoherent[k, k, on] ** 2
        cap = problem.budget_bound / problem.budget_weights[on, k]
        full_power = float(np.dot(a, cap) ** 2)
        if np.all(b > 0):
            bounds[k] = min(full_power, float(np.sum(a**2 / b)))
        else:
            bounds[k] = full_power
    return bounds


@dataclass(frozen=True)
class FeasibilityResult:
    """Outcome of one feasibility check."""

    status: str
    nu: float
    eta: Optional[np.ndarray] = None

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


class PreparedFeasibility(Protocol):
    def check(self, nu: float, feas_tol: float) -> FeasibilityResult: ...


class FeasibilityBackend(Protocol):
    name: str

    def prepare(self, problem: SocProblem) -> PreparedFeasibility: ...


class _CvxpyFeasibility:
    """cvxpy model of one SocProblem with sqrt(nu) as a parameter."""

    def __init__(self, problem: SocProblem, solver: str, max_iters: Optional[int]):
        self.problem = problem
        self.solver = solver
        self.max_iters = max_iters

        entries = np.argwhere(problem.support)
        self.entries = entries
        # u_mk = scale_e * z_e puts every AP budget on the unit ball
        self.scale = problem.budget_bound / problem.budget_weights[entries[:, 0], entries[:, 1]]
        n = len(entries)
        column = entries[:, 1]

        self.z = cp.Variable(n, nonneg=True)
        self.sqrt_nu = cp.Parameter(nonneg=True)
        constraints = []

        for m in np.unique(entries[:, 0]):
            constraints.append(cp.norm(self.z[np.flatnonzero(entries[:, 0] == m)], 2) <= 1.0)

        K = problem.K
        for k in range(K):
            signal_row = np.where(column == k, problem.signal[k, entries[:, 0]], 0.0) * self.scale
            blocks = [
                sp.diags(problem.noncoherent[k, column, entries[:, 0]] * self.scale),
                sp.csr_matrix((1, n)),
            ]
            rows = [
                np.where(column == j, problem.cross[k, j, entries[:, 0]], 0.0) * self.scale
                for j in range(K)
                if j != k
            ]
            if rows:
                blocks.insert(0, sp.csr_matrix(np.vstack(rows)))
            stacked = sp.vstack(blocks).tocsr()
            noise = np.zeros(stacked.shape[0])
            noise[-1] = 1.0
            interference = cp.Constant(stacked) @ self.z + noise
            constraints.append(cp.SOC(signal_row @ self.z, self.sqrt_nu * interference))

        self.model = cp.Problem(cp.Minimize(0), constraints)

    def _solve(self, feas_tol: float):
        if self.solver == "scs":
            return self.model.solve(
                solver=cp.SCS, eps_abs=feas_tol, eps_rel=feas_tol, max_iters=self.max_iters
            )
        return self.model.solve(solver=cp.CLARABEL)

    def check(self, nu: float, feas_tol: float) -> FeasibilityResult:
        if nu <= 0:
            return FeasibilityResult(FEASIBLE, nu, self.problem.mr_eta.copy())

        self.sqrt_nu.value = float(np.sqrt(nu))
        try:
            self._solve(feas_tol)
        except cp.SolverError as e:
            logger.warning(f"{self.solver} failed at nu={nu:.6g}: {e}")
            return FeasibilityResult(UNDECIDED, nu)

        status = self.model.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return FeasibilityResult(INFEASIBLE, nu)
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or self.z.value is None:
            logger.warning(f"{self.solver} returned '{status}' at nu={nu:.6g}")
            return FeasibilityResult(UNDECIDED, nu)

        eta = self._witness(np.maximum(self.z.value, 0.0))
        if not witness_satisfies(self.problem, eta, nu, feas_tol):
            logger.warning(f"{self.solver} witness at nu={nu:.6g} fails verification")
            return FeasibilityResult(UNDECIDED, nu)
        return FeasibilityResult(FEASIBLE, nu, eta)

    def _witness(self, z: np.ndarray) -> np.ndarray:
        u = np.zeros(self.problem.support.shape)
        u[self.entries[:, 0], self.entries[:, 1]] = self.scale * z
        return u**2 / self.problem.rho_d


class CvxpyBackend:
    """Feasibility through cvxpy with a named conic solver."""

    def __init__(self, solver: str = "clarabel", max_iters: Optional[int] = None):
        if solver not in ("clarabel", "scs"):
            raise ConfigError(f"unknown feasibility backend '{solver}'", key="mmf.backend")
        self.name = solver
        self.max_iters = max_iters

    def prepare(self, problem: SocProblem) -> _CvxpyFeasibility:
        cap = self.max_iters or 50 * problem.M * problem.K
        return _CvxpyFeasibility(problem, self.name, cap)


def get_backend(backend: Union[str, FeasibilityBackend, None]) -> FeasibilityBackend:
    if backend is None:
        return CvxpyBackend()
    if isinstance(backend, str):
        return CvxpyBackend(backend)
    return backend


def witness_satisfies(problem: SocProblem, eta: np.ndarray, nu: float, feas_tol: float) -> bool:
    """Check every cone of the problem at eta, each slackened by feas_tol."""
    u = np.sqrt(problem.rho_d * eta)
    rhs = np.einsum("km,mk->k", problem.signal, u)
    coherent = np.einsum("kjm,mj->kj", problem.cross, u) ** 2
    noncoherent = np.einsum("kjm,mj->k", problem.noncoherent**2, u**2)
    lhs = np.sqrt(nu * (coherent.sum(axis=1) + noncoherent + 1.0))
    cones_ok = np.all(lhs <= rhs + feas_tol * np.maximum(1.0, rhs))
    budget_ok = np.all(np.sqrt(soc_load(problem, eta)) <= 1.0 + feas_tol)
    support_ok = not np.any(eta[~problem.support] > 0)
    return bool(cones_ok and budget_ok and support_ok)


def feasibility_check(
    problem: SocProblem,
    nu: float,
    feas_tol: float = DEFAULT_FEAS_TOL,
    backend: Union[str, FeasibilityBackend, None] = None,
) -> FeasibilityResult:
    """
    Decide whether some eta reaches SINR_k >= nu for all users.

    Args:
        problem: Cone data from build_soc_problem
        nu: Linear SINR target (>= 0)
        feas_tol: Cone slack accepted on the returned witness
        backend: Backend name ("clarabel", "scs") or backend instance

    Returns:
        FeasibilityResult with status feasible (and a witness eta), infeasible or undecided
    """
    if nu < 0:
        raise ValueError(f"nu must be >= 0, got {nu}")
    return get_backend(backend).prepare(problem).check(nu, feas_tol)


def _fit_budget(problem: SocProblem, eta: np.ndarray) -> np.ndarray:
    load = soc_load(problem, eta)
    factor = np.where(load > 1.0, 1.0 / np.maximum(load, 1e-300), 1.0)
    return eta * factor[:, None] * problem.support


def equalize_sinr(
    snapshot: Snapshot, eta: np.ndarray, scheme: Scheme, config: SystemConfig
) -> np.ndarray:
    """
    Scale each user's coefficients down until every SINR equals the current minimum.

    All report terms are linear in a user's own column scale, so the scales solve a
    linear system; the standard interference-function iteration is the fallback.
    Scaling down never breaks a per-AP budget.
    """
    report = evaluate(snapshot, eta, scheme, config, strict=False)
    target = float(np.min(report.sinr))
    if target <= 0:
        return eta

    own = report.coherent_gain - target * report.self_interference
    system = np.diag(own) - target * report.ui_pairs
    try:
        scales = np.linalg.solve(system, np.full(snapshot.K, target))
    except np.linalg.LinAlgError:
        scales = None

    if scales is None or not np.all(np.isfinite(scales)) or np.any(scales <= 0) or np.any(
        scales > 1.0 + 1e-9
    ):
        scales = np.ones(snapshot.K)
        for _ in range(1000):
            updated = np.minimum(target * (report.ui_pairs @ scales + 1.0) / own, 1.0)
            if np.max(np.abs(updated - scales)) <= 1e-13:
                scales = updated
                break
            scales = updated
    return eta * np.minimum(scales, 1.0)[None, :]


def solve_mmf(
    snapshot: Snapshot,
    scheme: Scheme,
    config: SystemConfig,
    bisect_tol: float = DEFAULT_BISECT_TOL,
    feas_tol: float = DEFAULT_FEAS_TOL,
    backend: Union[str, FeasibilityBackend, None] = None,
    sim_logger: Optional[SimLogger] = None,
    max_steps: int = 200,
) -> MmfSolution:
    """
    Max-min fairness power control by bisection on the common SINR target.

    The bracket starts at the maximal-ratio min-SINR (always feasible) and the
    single-user SINR bound. The last feasible witness is fitted to the budgets and
    equalized.

    Args:
        snapshot: Network realization
        scheme: CB, NCB or ECB
        config: System parameters
        bisect_tol: Relative bracket width at termination
        feas_tol: Cone slack for witnesses
        backend: Feasibility backend (name or instance)
        sim_logger: Receives one event per bisection step
        max_steps: Safety cap on bisection steps

    Returns:
        MmfSolution

    Raises:
        SolverError: If the maximal-ratio start point is not a valid witness
    """
    scheme = Scheme.parse(scheme)
    problem = build_soc_problem(snapshot, scheme, config)
    prepared = get_backend(backend).prepare(problem)

    witness = problem.mr_eta.copy()
    lo = float(np.min(soc_sinr(problem, witness)))
    if not witness_satisfies(problem, witness, lo * (1.0 - 1e-9), feas_tol):
        raise SolverError(f"{scheme.value}: maximal-ratio start point violates the cone data")
    hi = max(float(np.min(single_user_sinr_bound(problem))), lo)

    iterations = 0
    undecided = 0
    while hi > 0 and (hi - lo) / hi > bisect_tol and iterations < max_steps:
        mid = 0.5 * (lo + hi)
        result = prepared.check(mid, feas_tol)
        iterations += 1
        if result.feasible:
            lo, witness = mid, result.eta
        else:
            hi = mid
            undecided += result.status == UNDECIDED
        if sim_logger is not None:
            sim_logger.log_bisection(scheme, iterations, mid, result.status, lo, hi)

    eta = equalize_sinr(snapshot, _fit_budget(problem, witness), scheme, config)
    achieved = float(np.min(evaluate(snapshot, eta, scheme, config, strict=False).sinr))
    if undecided:
        logger.warning(f"{scheme.value} MMF: {undecided} undecided feasibility checks")
    logger.debug(f"{scheme.value} MMF: nu={achieved:.6g} after {iterations} steps")

    return MmfSolution(
        scheme=scheme,
        eta=eta,
        nu=achieved,
        target=lo,
        iterations=iterations,
        feas_tol=feas_tol,
        bisect_tol=bisect_tol,
        undecided=undecided,
        extension=scheme is Scheme.CB,
    )


def verify_mmf(
    snapshot: Snapshot,
    scheme: Scheme,
    solution: Union[MmfSolution, PowerAllocation],
    config: SystemConfig,
    bisect_tol: Optional[float] = None,
    constraint_tol: float = 1e-6,
) -> MmfAudit:
    """
    Audit an allocation for the MMF optimality signature.

    Checks the equal-SINR spread, the per-AP constraints and cluster support. When
    the solution reports a max-min value nu, the achieved minimum SINR must also
    reach it within the bisection tolerance.
    """
    scheme = Scheme.parse(scheme)
    eta = solution.eta
    if bisect_tol is None:
        bisect_tol = getattr(solution, "bisect_tol", DEFAULT_BISECT_TOL)

    sinr = evaluate(snapshot, eta, scheme, config, strict=False).sinr
    low, high = float(np.min(sinr)), float(np.max(sinr))
    nu = getattr(solution, "nu", low)
    loads = power_constraint_load(snapshot, eta, scheme)

    return MmfAudit(
        scheme=scheme,
        min_sinr=low,
        max_sinr=high,
        spread_ok=high - low <= 10.0 * bisect_tol * nu,
        constraints_ok=bool(np.all(loads <= 1.0 + constraint_tol)),
        support_ok=not bool(np.any(eta[~snapshot.cluster_mask] > 0)),
        target_ok=low >= nu * (1.0 - 10.0 * bisect_tol),
    )


def mmf_summary(solution: MmfSolution) -> Dict[str, float]:
    return {
        "nu": solution.nu,
        "target": solution.target,
        "iterations": solution.iterations,
        "undecided": solution.undecided,
    }
