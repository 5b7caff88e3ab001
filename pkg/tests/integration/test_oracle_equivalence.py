"""
Integration test: Closed forms versus the Monte Carlo oracle.
Draws channels and estimates, precodes, and compares every SINR constituent
and expectation identity with its closed form.
"""

import numpy as np
import pytest

from src.closedform import (
    evaluate,
    kappa,
    maximal_ratio_power,
    power_constraint_load,
    varsigma,
)
from src.exceptions import OracleFailure
from src.mmf import build_soc_problem
from src.models import Scheme, SystemConfig
from src.oracle import (
    cbdt_closed_forms,
    check_instance,
    compare,
    estimate_cbdt,
    estimate_ds_bu_ui,
    estimate_power,
    random_instance,
    run_oracle_suite,
    verify_identities,
)
from tests.fixtures.instances import exact_snapshot, fading_snapshot, small_config

SCHEMES = (Scheme.CB, Scheme.NCB, Scheme.ECB)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_sinr_constituents_match_oracle(random_snapshot, scheme):
    snapshot, config = random_snapshot
    failures = check_instance(snapshot, config, scheme, trials=40_000, seed=17, z_threshold=4.5)
    assert failures == [], f"oracle disagreement: {failures}"


def test_oracle_suite_on_a_few_instances(test_logger):
    checks = run_oracle_suite(
        SystemConfig(),
        instances=3,
        trials=20_000,
        seed=5,
        z_threshold=4.5,
        schemes=(Scheme.CB, Scheme.NCB),
        sim_logger=test_logger,
    )
    assert checks == 3 * 2 * 3


@pytest.mark.slow
def test_oracle_suite_twenty_instances():
    """20 random instances, 10^5 trials each, |z| <= 4 for DS, BU and every UI pair."""
    assert run_oracle_suite(SystemConfig(), instances=20, trials=100_000, seed=0) == 180


def test_oracle_suite_reports_failures(mocker):
    mocker.patch("src.oracle.check_instance", return_value=["#0.CB.coherent_gain (worst z=9.00)"])
    with pytest.raises(OracleFailure) as excinfo:
        run_oracle_suite(SystemConfig(), instances=2, trials=10, seed=1, schemes=(Scheme.CB,))
    assert len(excinfo.value.failures) == 2


@pytest.mark.parametrize("scheme", SCHEMES)
def test_orthogonal_pilots_leave_only_noncoherent_interference(rng, scheme):
    """With tau_up >= K and distinct pilots, E[a_kj] = 0 and UI is the variance alone."""
    config = small_config(M=5, K=3, N=4, tau_up=3)
    beta = 10.0 ** rng.uniform(-2.0, 0.0, size=(5, 3))
    snapshot = fading_snapshot(beta, [0, 1, 2], config, dl_pilot=[0, 1, 2])
    np.testing.assert_array_equal(snapshot.ul_overlap, np.eye(3))
    eta = maximal_ratio_power(snapshot, scheme).eta
    gamma, rho, N = snapshot.gamma, config.rho_d, snapshot.antennas

    if scheme is Scheme.CB:
        noncoherent = rho * N * beta.T @ (eta * gamma)
    elif scheme is Scheme.NCB:
        noncoherent = rho * beta.T @ eta
    else:
        noncoherent = rho / (N - 1) * beta.T @ (eta / gamma)
    off = ~np.eye(3, dtype=bool)

    closed = evaluate(snapshot, eta, scheme, config)
    np.testing.assert_allclose(closed.ui_pairs[off], noncoherent[off], rtol=1e-12)
    assert np.all(build_soc_problem(snapshot, scheme, config).cross == 0)

    mc = estimate_ds_bu_ui(snapshot, eta, scheme, config, trials=40_000, seed=29)
    expected = noncoherent.copy()
    np.fill_diagonal(expected, np.nan)
    result = compare(expected, mc.inter_user, 4.5)
    assert result.passed, f"{scheme.value} UI worst z={result.worst:.2f}"
    assert compare(closed.coherent_gain, mc.coherent_gain, 4.5).passed


@pytest.mark.parametrize("scheme", SCHEMES)
def test_transmit_power_matches_budget(random_snapshot, scheme):
    """Maximal-ratio loads every AP fully, so E||x_m||^2 = rho_d; half the power gives half."""
    snapshot, config = random_snapshot
    eta = maximal_ratio_power(snapshot, scheme).eta

    full = estimate_power(snapshot, eta, scheme, config, trials=40_000, seed=3)
    expected = config.rho_d * power_constraint_load(snapshot, eta, scheme)
    np.testing.assert_allclose(expected, config.rho_d, rtol=1e-12)
    assert compare(expected, full, 4.5).passed, f"power z={compare(expected, full).z}"

    half = estimate_power(snapshot, eta / 2, scheme, config, trials=40_000, seed=4)
    assert compare(expected / 2, half, 4.5).passed


def test_zero_power_transmits_nothing(random_snapshot):
    snapshot, config = random_snapshot
    silent = estimate_power(snapshot, np.zeros((5, 3)), Scheme.NCB, config, trials=100, seed=1)

    assert np.all(silent.estimate == 0)
    assert compare(np.zeros(5), silent).passed


def test_ecb_with_perfect_estimates_has_no_self_interference(rng):
    beta = rng.uniform(0.1, 1.0, size=(3, 2))
    snapshot = exact_snapshot(beta, N=4)
    config = small_config(M=3, K=2, N=4)
    eta = maximal_ratio_power(snapshot, Scheme.ECB).eta

    mc = estimate_ds_bu_ui(snapshot, eta, Scheme.ECB, config, trials=1_000, seed=2, perfect=True)
    closed = evaluate(snapshot, eta, Scheme.ECB, config)

    assert np.all(closed.self_interference == 0)
    assert np.all(mc.self_interference.estimate <= 1e-20 * mc.coherent_gain.estimate)
    np.testing.assert_allclose(mc.coherent_gain.estimate, closed.coherent_gain, rtol=1e-9)


def test_oracle_streams_are_reproducible(random_snapshot):
    snapshot, config = random_snapshot
    eta = maximal_ratio_power(snapshot, Scheme.CB).eta
    first = estimate_ds_bu_ui(snapshot, eta, Scheme.CB, config, trials=500, seed=8)
    second = estimate_ds_bu_ui(snapshot, eta, Scheme.CB, config, trials=500, seed=8, batch_size=7)

    assert first.coherent_gain.trials == second.coherent_gain.trials == 500
    third = estimate_ds_bu_ui(snapshot, eta, Scheme.CB, config, trials=500, seed=8)
    np.testing.assert_array_equal(first.coherent_gain.estimate, third.coherent_gain.estimate)


@pytest.mark.parametrize("N", [4, 8])
def test_expectation_identities(N):
    rng = np.random.default_rng(100 + N)
    snapshot, config = random_instance(rng, SystemConfig(), N_choices=(N,), K_choices=(3,))

    report = verify_identities(snapshot, config, trials=100_000, seed=N, z_threshold=5.0)

    for check in report.checks:
        assert check.comparison.passed, f"N={N} {check.name}: worst z={check.comparison.worst:.2f}"


def test_expectation_identities_two_antennas():
    """At N=2 only the first moments have finite variance; E[1/|g_hat|^2] is checked relatively."""
    rng = np.random.default_rng(7)
    snapshot, config = random_instance(rng, SystemConfig(), N_choices=(2,), K_choices=(2,))

    report = verify_identities(snapshot, config, trials=100_000, seed=3, z_threshold=5.0)

    assert report.by_name("normalized_gain_mean").comparison.passed
    assert report.by_name("cross_mean").comparison.passed
    inverse = report.by_name("inverse_norm")
    np.testing.assert_allclose(inverse.estimate.estimate, inverse.closed, rtol=0.1)
    np.testing.assert_allclose(inverse.closed * (2 - 1) * snapshot.gamma, 1.0)


def _check_cbdt(snapshot, config, trials, seed, z_threshold):
    eta = maximal_ratio_power(snapshot, Scheme.CB).eta
    closed = cbdt_closed_forms(snapshot, eta, config)
    mc = estimate_cbdt(snapshot, eta, config, trials=trials, seed=seed)
    return {
        name: compare(closed[name], getattr(mc, name), z_threshold)
        for name in ("kappa", "estimate_power", "error_power", "pair_power", "cross_covariance")
    }


def test_downlink_training_moments(rng):
    snapshot, config = random_instance(rng, SystemConfig(), K_choices=(3,))
    results = _check_cbdt(snapshot, config, trials=40_000, seed=21, z_threshold=4.5)
    for name, result in results.items():
        assert result.passed, f"{name}: worst z={result.worst:.2f}"


@pytest.mark.slow
def test_downlink_training_moments_ten_instances():
    rng = np.random.default_rng(2024)
    for i in range(10):
        snapshot, config = random_instance(rng, SystemConfig())
        for name, result in _check_cbdt(snapshot, config, 100_000, i, 4.0).items():
            if name in ("kappa", "error_power"):
                assert result.passed, f"instance {i} {name}: worst z={result.worst:.2f}"


def test_kappa_closed_form_is_bounded_by_own_gain(rng):
    for _ in range(200):
        snapshot, config = random_instance(rng, SystemConfig())
        eta = maximal_ratio_power(snapshot, Scheme.CB).eta
        bound = snapshot.antennas * np.diag(varsigma(snapshot, eta))
        assert np.all(kappa(snapshot, eta, config) <= bound)
