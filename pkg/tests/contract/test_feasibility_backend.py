"""
Contract test: Feasibility backends used by the MMF bisection.

A backend answers feasible (with a verified witness), infeasible or undecided,
and the bisection treats undecided as infeasible.
"""

import logging

import numpy as np
import pytest

from src.exceptions import ConfigError
from src.models import Scheme
from src.mmf import (
    FEASIBLE,
    INFEASIBLE,
    UNDECIDED,
    CvxpyBackend,
    FeasibilityResult,
    build_soc_problem,
    feasibility_check,
    get_backend,
    single_user_sinr_bound,
    soc_sinr,
    solve_mmf,
    witness_satisfies,
)
from tests.fixtures.instances import random_instance


@pytest.fixture
def problem():
    rng = np.random.default_rng(12)
    snapshot, config = random_instance(rng, M=6, K=3, N=4, tau_up=2)
    return snapshot, config, build_soc_problem(snapshot, Scheme.NCB, config)


class ThresholdBackend:
    """Feasible exactly below a fixed target; the witness is always maximal-ratio."""

    name = "threshold"

    def __init__(self, threshold: float, status_above: str = INFEASIBLE):
        self.threshold = threshold
        self.status_above = status_above

    def prepare(self, problem):
        backend = self

        class Prepared:
            def check(self, nu, feas_tol):
                if nu <= backend.threshold:
                    return FeasibilityResult(FEASIBLE, nu, problem.mr_eta.copy())
                return FeasibilityResult(backend.status_above, nu)

        return Prepared()


@pytest.mark.parametrize("solver", ["clarabel", "scs"])
def test_status_is_one_of_three(problem, solver):
    _, _, soc = problem
    for nu in (0.5, 5.0, 500.0):
        result = feasibility_check(soc, nu, feas_tol=1e-4, backend=solver)
        assert result.status in (FEASIBLE, INFEASIBLE, UNDECIDED)
        if result.feasible:
            assert witness_satisfies(soc, result.eta, nu, 1e-4)
        else:
            assert result.eta is None


def test_zero_target_is_always_feasible(problem):
    _, _, soc = problem
    result = feasibility_check(soc, 0.0)
    assert result.feasible
    np.testing.assert_array_equal(result.eta, soc.mr_eta)


def test_negative_target_is_rejected(problem):
    with pytest.raises(ValueError):
        feasibility_check(problem[2], -1.0)


def test_unknown_backend_is_a_config_error():
    with pytest.raises(ConfigError) as excinfo:
        get_backend("gurobi")
    assert excinfo.value.key == "mmf.backend"


def test_backend_names():
    assert get_backend(None).name == "clarabel"
    assert get_backend("scs").name == "scs"
    custom = ThresholdBackend(1.0)
    assert get_backend(custom) is custom


def test_scs_agrees_with_clarabel_away_from_the_boundary(problem):
    snapshot, config, soc = problem
    nu = solve_mmf(snapshot, Scheme.NCB, config).nu

    backend = CvxpyBackend("scs", max_iters=20_000)
    assert feasibility_check(soc, 0.8 * nu, 1e-4, backend).status != INFEASIBLE
    assert feasibility_check(soc, 1.2 * nu, 1e-4, backend).status != FEASIBLE


def test_bisection_converges_to_backend_threshold(problem, mocker):
    snapshot, config, soc = problem
    lo = float(np.min(soc_sinr(soc, soc.mr_eta)))
    hi = float(np.min(single_user_sinr_bound(soc)))
    threshold = lo + 0.3 * (hi - lo)
    sim_logger = mocker.Mock()

    solution = solve_mmf(
        snapshot, Scheme.NCB, config, backend=ThresholdBackend(threshold), sim_logger=sim_logger
    )

    assert threshold * (1 - 1e-3) <= solution.target <= threshold
    assert solution.undecided == 0
    assert sim_logger.log_bisection.call_count == solution.iterations


def test_undecided_checks_count_as_infeasible(problem, caplog):
    snapshot, config, soc = problem
    lo = float(np.min(soc_sinr(soc, soc.mr_eta)))

    with caplog.at_level(logging.WARNING, logger="cellfree_sim"):
        solution = solve_mmf(
            snapshot, Scheme.NCB, config, backend=ThresholdBackend(0.0, status_above=UNDECIDED)
        )

    assert solution.target == pytest.approx(lo)
    assert solution.undecided == solution.iterations > 0
    assert "undecided" in caplog.text
