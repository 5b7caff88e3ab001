"""
Unit test: Uplink MMSE estimation statistics and channel sampling.
"""

import numpy as np
import pytest

from src.estimation import (
    compute_c,
    compute_gamma,
    estimate_channels,
    pilot_overlap,
    sample_channels,
)
from tests.fixtures.instances import fading_snapshot, small_config


def test_pilot_overlap_marks_shared_indices():
    overlap = pilot_overlap([0, 1, 0])
    np.testing.assert_array_equal(overlap, [[1, 0, 1], [0, 1, 0], [1, 0, 1]])


def test_single_user_c_and_gamma():
    """K=1, beta=1, tau*rho_u = 10: c = sqrt(10)/11 and gamma = 10/11."""
    c = compute_c(np.array([[1.0]]), [0], tau_up=1, rho_u=10.0)
    gamma = compute_gamma(c, np.array([[1.0]]), tau_up=1, rho_u=10.0)

    assert c[0, 0] == pytest.approx(np.sqrt(10) / 11, rel=1e-12)
    assert c[0, 0] == pytest.approx(0.2875, abs=1e-4)
    assert gamma[0, 0] == pytest.approx(10 / 11, rel=1e-12)


def test_copilot_pair_shares_the_contaminated_denominator():
    c = compute_c(np.array([[1.0, 1.0]]), [0, 0], tau_up=1, rho_u=10.0)
    np.testing.assert_allclose(c, [[np.sqrt(10) / 21, np.sqrt(10) / 21]], rtol=1e-12)


def test_c_vanishes_without_pilot_power():
    c = compute_c(np.array([[0.5]]), [0], tau_up=1, rho_u=1e-14)
    assert c[0, 0] < 1e-6


def test_gamma_approaches_beta_with_strong_orthogonal_pilots():
    beta = np.array([[0.3, 0.02]])
    c = compute_c(beta, [0, 1], tau_up=2, rho_u=1e12)
    gamma = compute_gamma(c, beta, tau_up=2, rho_u=1e12)
    np.testing.assert_allclose(gamma, beta, rtol=1e-9)


def test_copilot_gamma_ratio_is_beta_ratio_squared():
    beta = np.array([[0.8, 0.1], [0.05, 0.4]])
    c = compute_c(beta, [0, 0], tau_up=1, rho_u=7.0)
    gamma = compute_gamma(c, beta, tau_up=1, rho_u=7.0)
    np.testing.assert_allclose(gamma[:, 0] / gamma[:, 1], (beta[:, 0] / beta[:, 1]) ** 2)


def _snapshot():
    config = small_config(M=2, K=3, N=4, tau_up=2)
    beta = np.array([[0.9, 0.2, 0.5], [0.1, 0.6, 0.3]])
    return fading_snapshot(beta, [0, 1, 0], config), config


def test_sampled_channels_have_beta_variance():
    snapshot, _ = _snapshot()
    g = sample_channels(snapshot, seed=1, trials=20000).g

    assert g.shape == (20000, 2, 3, 4)
    power = np.mean(np.abs(g) ** 2, axis=(0, 3))
    np.testing.assert_allclose(power, snapshot.beta, rtol=0.03)
    np.testing.assert_allclose(np.var(g.real, axis=(0, 3)), snapshot.beta / 2, rtol=0.03)
    np.testing.assert_allclose(np.var(g.imag, axis=(0, 3)), snapshot.beta / 2, rtol=0.03)


def test_sampled_channels_are_independent_across_pairs():
    snapshot, _ = _snapshot()
    g = sample_channels(snapshot, seed=2, trials=20000).g[:, :, :, 0]

    cross = np.mean(g[:, 0, 0] * np.conj(g[:, 1, 0]))
    se = np.sqrt(snapshot.beta[0, 0] * snapshot.beta[1, 0] / 20000)
    assert abs(cross) < 5 * se


def test_estimates_have_gamma_variance_and_orthogonal_error():
    snapshot, config = _snapshot()
    draw = sample_channels(snapshot, seed=3, trials=20000)
    draw = estimate_channels(draw.g, snapshot, config, seed=4)

    power = np.mean(np.abs(draw.g_hat) ** 2, axis=(0, 3))
    np.testing.assert_allclose(power, snapshot.gamma, rtol=0.03)

    error_power = np.mean(np.abs(draw.g_tilde) ** 2, axis=(0, 3))
    np.testing.assert_allclose(error_power, snapshot.beta - snapshot.gamma, rtol=0.05)

    product = draw.g_hat[..., 0] * np.conj(draw.g_tilde[..., 0])
    se = np.std(product, axis=0) / np.sqrt(product.shape[0])
    assert np.all(np.abs(product.mean(axis=0)) < 5 * se)


def test_copilot_estimates_are_exactly_proportional():
    """g_hat_k beta_j - g_hat_j beta_k = 0 per draw for users on the same pilot."""
    snapshot, config = _snapshot()
    draw = sample_channels(snapshot, seed=5, trials=50)
    g_hat = estimate_channels(draw.g, snapshot, config, seed=6).g_hat

    beta = snapshot.beta
    lhs = g_hat[:, :, 0, :] * beta[None, :, 2, None]
    rhs = g_hat[:, :, 2, :] * beta[None, :, 0, None]
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-15)


def test_perfect_estimation_returns_the_channel():
    snapshot, config = _snapshot()
    g = sample_channels(snapshot, seed=7).g
    draw = estimate_channels(g, snapshot, config, seed=8, perfect=True)

    assert g.shape == (2, 3, 4)
    np.testing.assert_array_equal(draw.g_hat, g)
    assert np.all(draw.g_tilde == 0)
