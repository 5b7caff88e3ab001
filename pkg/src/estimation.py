"""
Uplink training statistics and channel sampling.

The closed-form path uses compute_c / compute_gamma only; sampling functions feed
the Monte Carlo oracle and never run inside closed-form evaluation.
"""

from typing import Optional, Union

import numpy as np

from .models import ChannelDraw, Snapshot, SystemConfig

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def pilot_overlap(indices) -> np.ndarray:
    """K x K matrix with entry 1 where two users hold the same pilot index, else 0."""
    indices = np.asarray(indices)
    return (indices[:, None] == indices[None, :]).astype(float)


def compute_c(beta: np.ndarray, ul_pilot, tau_up: int, rho_u: float) -> np.ndarray:
    """
    MMSE scaling coefficients c_mk.

    Args:
        beta: M x K large-scale fading (linear, > 0)
        ul_pilot: K uplink pilot indices
        tau_up: Uplink pilot length
        rho_u: Normalized uplink SNR

    Returns:
        M x K matrix of c_mk
    """
    beta = np.asarray(beta, dtype=float)
    tau_rho = tau_up * rho_u
    contaminated = beta @ pilot_overlap(ul_pilot)
    return np.sqrt(tau_rho) * beta / (tau_rho * contaminated + 1.0)


def compute_gamma(c: np.ndarray, beta: np.ndarray, tau_up: int, rho_u: float) -> np.ndarray:
    """Mean-square of each channel estimate component, gamma_mk = sqrt(tau rho_u) c_mk beta_mk."""
    return np.sqrt(tau_up * rho_u) * np.asarray(c) * np.asarray(beta)


def complex_normal(rng: np.random.Generator, shape, variance=1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with the given (broadcast) variance."""
    scale = np.sqrt(np.asarray(variance, dtype=float) / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def sample_channels(
    snapshot: Snapshot, seed: SeedLike, trials: Optional[int] = None
) -> ChannelDraw:
    """
    Draw i.i.d. Rayleigh channels g_mk ~ CN(0, beta_mk I_N).

    Args:
        snapshot: Network realization
        seed: Seed, SeedSequence or Generator
        trials: Optional leading batch size

    Returns:
        ChannelDraw with g of shape ([trials,] M, K, N)
    """
    rng = np.random.default_rng(seed)
    M, K, N = snapshot.M, snapshot.K, snapshot.antennas
    lead = () if trials is None else (trials,)
    g = complex_normal(rng, lead + (M, K, N), snapshot.beta[:, :, None])
    return ChannelDraw(g=g)


def estimate_channels(
    g: np.ndarray,
    snapshot: Snapshot,
    config: SystemConfig,
    seed: SeedLike,
    perfect: bool = False,
) -> ChannelDraw:
    """
    Simulate uplink training and MMSE estimation for sampled channels.

    The de-spread pilot noise is drawn per (AP, pilot index), so users sharing a
    pilot observe the same y_p and their estimates stay exactly proportional.

    Args:
        g: True channels ([trials,] M, K, N)
        snapshot: Network realization (provides c and the pilot indices)
        config: System parameters (tau_up, rho_u)
        seed: Seed for the pilot noise
        perfect: Return g_hat = g instead of simulating training

    Returns:
        ChannelDraw holding g and g_hat
    """
    g = np.asarray(g)
    if perfect:
        return ChannelDraw(g=g, g_hat=g.copy())

    rng = np.random.default_rng(seed)
    lead = g.shape[:-3]
    M, N = snapshot.M, snapshot.antennas
    n_pilots = int(snapshot.ul_pilot.max()) + 1

    noise = complex_normal(rng, lead + (M, n_pilots, N))
    sqrt_tau_rho = np.sqrt(config.tau_up * config.rho_u)
    received = sqrt_tau_rho * np.einsum("...mjn,jk->...mkn", g, snapshot.ul_overlap)
    received = received + noise[..., snapshot.ul_pilot, :]
    g_hat = snapshot.c[:, :, None] * received
    return ChannelDraw(g=g, g_hat=g_hat)
