"""
Integration test: Max-min fairness power control.
Runs the bisection end to end and audits the allocation it returns.
"""

from dataclasses import replace

import numpy as np
import pytest

from src.closedform import evaluate, maximal_ratio_power, power_constraint_load
from src.models import Scheme
from src.mmf import (
    build_soc_problem,
    feasibility_check,
    mmf_summary,
    solve_mmf,
    verify_mmf,
)
from tests.fixtures.instances import fading_snapshot, random_instance, small_config

SCHEMES = (Scheme.CB, Scheme.NCB, Scheme.ECB)


def _audit(snapshot, config, scheme):
    solution = solve_mmf(snapshot, scheme, config)
    audit = verify_mmf(snapshot, scheme, solution, config)
    assert audit.passed, f"{scheme.value}: {audit}"

    loads = power_constraint_load(snapshot, solution.eta, scheme)
    assert np.all(loads <= 1.0 + 1e-6)

    sinr = evaluate(snapshot, solution.eta, scheme, config, strict=False).sinr
    assert (sinr.max() - sinr.min()) / sinr.min() <= 0.01

    mr = evaluate(snapshot, maximal_ratio_power(snapshot, scheme).eta, scheme, config).sinr
    assert solution.nu >= mr.min() * (1 - 1e-5)
    return solution


def _feasibility_is_monotone(snapshot, config, scheme, nu):
    problem = build_soc_problem(snapshot, scheme, config)
    grid = np.linspace(0.1, 1.9, 10) * nu
    feasible = [feasibility_check(problem, target).feasible for target in grid]
    # once infeasible, every larger target stays infeasible
    assert feasible == sorted(feasible, reverse=True), f"{scheme.value}: {feasible}"
    assert feasibility_check(problem, 0.9 * nu).feasible
    assert not feasibility_check(problem, 1.1 * nu).feasible


@pytest.mark.parametrize("scheme", SCHEMES)
def test_mmf_on_a_small_network(scheme):
    rng = np.random.default_rng(31)
    snapshot, config = random_instance(rng, M=8, K=3, N=4, tau_up=2)

    solution = _audit(snapshot, config, scheme)
    _feasibility_is_monotone(snapshot, config, scheme, solution.nu)

    assert solution.iterations > 0
    assert solution.extension is (scheme is Scheme.CB)
    assert mmf_summary(solution)["nu"] == solution.nu


@pytest.mark.slow
@pytest.mark.parametrize("scheme", SCHEMES)
def test_mmf_on_ten_random_networks(scheme):
    rng = np.random.default_rng(77)
    for _ in range(10):
        M = int(rng.integers(4, 21))
        K = int(rng.integers(2, 6))
        snapshot, config = random_instance(rng, M=M, K=K, N=4, tau_up=max(1, K - 1))

        solution = _audit(snapshot, config, scheme)
        _feasibility_is_monotone(snapshot, config, scheme, solution.nu)


def test_mmf_respects_ap_clusters():
    config = small_config(M=6, K=3, N=4, cluster_min=2, cluster_threshold=0.9)
    beta = np.array(
        [
            [1.0, 0.01, 0.001],
            [0.8, 0.02, 0.002],
            [0.01, 1.0, 0.01],
            [0.02, 0.7, 0.02],
            [0.001, 0.01, 1.0],
            [0.002, 0.02, 0.9],
        ]
    )
    snapshot = fading_snapshot(beta, [0, 1, 0], config, dl_pilot=[0, 1, 2], all_aps=False)
    assert not snapshot.cluster_mask.all()

    solution = solve_mmf(snapshot, Scheme.NCB, config)

    assert np.all(solution.eta[~snapshot.cluster_mask] == 0)
    assert verify_mmf(snapshot, Scheme.NCB, solution, config).passed


def test_symmetric_network_equalizes_sinr():
    config = small_config(M=2, K=2, N=4, tau_up=2)
    beta = np.array([[1.0, 0.1], [0.1, 1.0]])
    snapshot = fading_snapshot(beta, [0, 1], config, dl_pilot=[0, 1])

    solution = solve_mmf(snapshot, Scheme.ECB, config)
    sinr = evaluate(snapshot, solution.eta, Scheme.ECB, config).sinr

    np.testing.assert_allclose(sinr[0], sinr[1], rtol=1e-3)
    mr = maximal_ratio_power(snapshot, Scheme.ECB).eta
    assert solution.nu >= evaluate(snapshot, mr, Scheme.ECB, config).sinr.min() * (1 - 1e-5)


def test_bisection_events_are_logged(mocker):
    rng = np.random.default_rng(5)
    snapshot, config = random_instance(rng, M=5, K=2, N=4, tau_up=2)
    sim_logger = mocker.Mock()

    solution = solve_mmf(snapshot, Scheme.CB, config, sim_logger=sim_logger)

    assert sim_logger.log_bisection.call_count == solution.iterations
    first = sim_logger.log_bisection.call_args_list[0].args
    assert first[0] is Scheme.CB and first[1] == 1


@pytest.mark.parametrize("scheme", SCHEMES)
def test_audit_rejects_allocations_that_miss_the_reported_value(scheme):
    rng = np.random.default_rng(41)
    snapshot, config = random_instance(rng, M=6, K=3, N=4, tau_up=2, rho_d=0.5)
    solution = solve_mmf(snapshot, scheme, config)

    solved = verify_mmf(snapshot, scheme, solution, config)
    assert solved.passed and solved.target_ok
    assert solved.min_sinr >= solution.nu * (1 - 1e-2)

    # a feasible but scaled-down allocation still claiming the max-min value
    weaker = replace(solution, eta=0.2 * solution.eta)
    audit = verify_mmf(snapshot, scheme, weaker, config)
    assert audit.constraints_ok and audit.support_ok
    assert audit.min_sinr < 0.9 * solution.nu
    assert not audit.target_ok
    assert not audit.passed

    inflated = verify_mmf(snapshot, scheme, replace(solution, nu=1.5 * solution.nu), config)
    assert not inflated.target_ok and not inflated.passed


@pytest.mark.parametrize("scheme", SCHEMES)
def test_audit_rejects_unequal_maximal_ratio_sinrs(scheme):
    config = small_config(M=3, K=3, N=4, tau_up=3, rho_d=0.5)
    beta = np.array([[1.0, 0.01, 0.001], [0.5, 0.02, 0.002], [0.8, 0.01, 0.003]])
    snapshot = fading_snapshot(beta, [0, 1, 2], config, dl_pilot=[0, 1, 2])
    allocation = maximal_ratio_power(snapshot, scheme)
    sinr = evaluate(snapshot, allocation.eta, scheme, config).sinr
    assert sinr.max() > 1.1 * sinr.min()

    audit = verify_mmf(snapshot, scheme, allocation, config)

    assert audit.constraints_ok and audit.target_ok
    assert not audit.spread_ok
    assert not audit.passed
