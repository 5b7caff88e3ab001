"""
Closed-form downlink SINR and spectral efficiency for CB, NCB, ECB and CB-DT.

Everything here is deterministic: a Snapshot plus power coefficients eta fully
determine the result. Internal terms are linear; dB appears only in
hardening_metrics.
"""

import logging
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import gammaln

from .exceptions import ConfigError, PowerConstraintError
from .models import PowerAllocation, Scheme, SinrReport, Snapshot, SystemConfig

logger = logging.getLogger("cellfree_sim")

EtaLike = Union[PowerAllocation, np.ndarray]
CONSTRAINT_TOL = 1e-9


def alpha(N: int) -> float:
    """Gamma(N + 1/2) / Gamma(N), evaluated through log-gamma."""
    if N < 1:
        raise ValueError(f"alpha needs N >= 1, got {N}")
    return float(np.exp(gammaln(N + 0.5) - gammaln(N)))


def _eta(snapshot: Snapshot, eta: EtaLike) -> np.ndarray:
    values = eta.eta if isinstance(eta, PowerAllocation) else np.asarray(eta, dtype=float)
    if values.shape != snapshot.beta.shape:
        raise ValueError(f"eta must be {snapshot.beta.shape}, got {values.shape}")
    return values


def _offdiag(matrix: np.ndarray) -> np.ndarray:
    out = np.array(matrix, dtype=float, copy=True)
    np.fill_diagonal(out, 0.0)
    return out


def varsigma(snapshot: Snapshot, eta: EtaLike) -> np.ndarray:
    """K x K matrix with entries sum_m eta_mj beta_mk gamma_mj (row k, column j)."""
    eta = _eta(snapshot, eta)
    return snapshot.beta.T @ (eta * snapshot.gamma)


def power_constraint_load(snapshot: Snapshot, eta: EtaLike, scheme: Scheme) -> np.ndarray:
    """
    Per-AP left-hand side of the scheme's power constraint (feasible iff <= 1).

    Args:
        snapshot: Network realization
        eta: Power coefficients
        scheme: Beamforming scheme

    Returns:
        Vector of M loads
    """
    eta = _eta(snapshot, eta)
    scheme = Scheme.parse(scheme)
    N = snapshot.antennas
    if scheme in (Scheme.CB, Scheme.CBDT):
        return N * np.sum(eta * snapshot.gamma, axis=1)
    if scheme is Scheme.NCB:
        return np.sum(eta, axis=1)
    _require_ecb_antennas(N)
    return np.sum(eta / snapshot.gamma, axis=1) / (N - 1)


def check_power_constraint(
    snapshot: Snapshot,
    eta: EtaLike,
    scheme: Scheme,
    strict: bool = True,
    tol: float = CONSTRAINT_TOL,
) -> float:
    """
    Validate the per-AP power constraint.

    Returns the worst load. Violations raise PowerConstraintError, or are logged as
    a warning when strict is False.
    """
    scheme = Scheme.parse(scheme)
    worst = float(np.max(power_constraint_load(snapshot, eta, scheme), initial=0.0))
    if worst > 1.0 + tol:
        message = f"{scheme.value} per-AP power constraint violated: worst load {worst:.12g} > 1"
        if strict:
            raise PowerConstraintError(message, scheme.value, worst)
        logger.warning(message)
    return worst


def _require_ecb_antennas(N: int):
    if N < 2:
        raise ConfigError(
            f"ECB needs N >= 2, got N={N}: E[1/|g_hat|^2] does not converge", key="system.N"
        )


def spectral_efficiency(
    sinr: np.ndarray, config: SystemConfig, scheme: Scheme, gross: bool = False
) -> np.ndarray:
    """
    Per-user SE in bit/s/Hz.

    Args:
        sinr: Linear SINR values
        config: Provides xi, tau_c, tau_up and tau_dp
        scheme: CB-DT also pays for downlink pilots
        gross: Drop the pilot-overhead pre-log factor

    Returns:
        SE per user
    """
    sinr = np.asarray(sinr, dtype=float)
    if np.any(sinr < 0):
        raise ValueError("SINR must be nonnegative")
    prelog = config.xi
    if not gross:
        prelog *= 1.0 - _overhead(config, Scheme.parse(scheme))
    return prelog * np.log2(1.0 + sinr)


def _overhead(config: SystemConfig, scheme: Scheme) -> float:
    pilots = config.tau_up + (config.tau_dp if scheme is Scheme.CBDT else 0)
    return pilots / config.tau_c


def _report(
    scheme: Scheme,
    coherent: np.ndarray,
    self_interference: np.ndarray,
    ui_pairs: np.ndarray,
    config: SystemConfig,
    kappa: Optional[np.ndarray] = None,
) -> SinrReport:
    ui_pairs = _offdiag(ui_pairs)
    inter_user = ui_pairs.sum(axis=1)
    sinr = coherent / (self_interference + inter_user + 1.0)
    return SinrReport(
        scheme=scheme,
        coherent_gain=coherent,
        self_interference=self_interference,
        inter_user_interference=inter_user,
        ui_pairs=ui_pairs,
        sinr=sinr,
        se=spectral_efficiency(sinr, config, scheme),
        gross_se=spectral_efficiency(sinr, config, scheme, gross=True),
        overhead=_overhead(config, scheme),
        kappa=kappa,
    )


def coherent_contamination(snapshot: Snapshot, eta: np.ndarray) -> np.ndarray:
    """K x K sums of sqrt(eta_mj) gamma_mj beta_mk / beta_mj over APs (CB contamination)."""
    beta = snapshot.beta
    return beta.T @ (np.sqrt(eta) * snapshot.gamma / beta)


def sinr_cb(
    snapshot: Snapshot, eta: EtaLike, config: SystemConfig, strict: bool = True
) -> SinrReport:
    """
    Conjugate beamforming SINR.

    Args:
        snapshot: Network realization
        eta: Power coefficients satisfying N sum_k eta gamma <= 1 per AP
        config: System parameters (rho_d, N, overhead)
        strict: Raise on constraint violation instead of warning

    Returns:
        SinrReport with per-user parts
    """
    eta = _eta(snapshot, eta)
    check_power_constraint(snapshot, eta, Scheme.CB, strict)
    rho, N = config.rho_d, snapshot.antennas

    coherent = rho * N**2 * np.sum(np.sqrt(eta) * snapshot.gamma, axis=0) ** 2
    sigma = varsigma(snapshot, eta)
    contamination = coherent_contamination(snapshot, eta)
    ui_pairs = rho * N * sigma + rho * N**2 * contamination**2 * snapshot.ul_overlap
    return _report(Scheme.CB, coherent, rho * N * np.diag(sigma), ui_pairs, config)


def upsilon(snapshot: Snapshot, eta: EtaLike) -> np.ndarray:
    """NCB coherent interference term, summed over AP pairs with n != m excluded explicitly."""
    eta = _eta(snapshot, eta)
    beta, gamma, N = snapshot.beta, snapshot.gamma, snapshot.antennas
    a2 = alpha(N) ** 2
    squares = (beta**2).T @ (eta * gamma / beta**2)
    linear = beta.T @ (np.sqrt(eta * gamma) / beta)
    return (N - 1) * squares + a2 * (linear**2 - squares)


def upsilon_rewrite(snapshot: Snapshot, eta: EtaLike) -> np.ndarray:
    """Same quantity as upsilon, with the double sum folded into one squared sum."""
    eta = _eta(snapshot, eta)
    beta, gamma, N = snapshot.beta, snapshot.gamma, snapshot.antennas
    a = alpha(N)
    squares = (beta**2).T @ (eta * gamma / beta**2)
    linear = beta.T @ (np.sqrt(eta * gamma) / beta)
    return (N - 1 - a**2) * squares + (a * linear) ** 2


def vartheta(snapshot: Snapshot) -> np.ndarray:
    """M x K x K array beta_mk + (N - 1 - alpha^2) gamma_mk [co-pilot k, j]."""
    N = snapshot.antennas
    spread = N - 1 - alpha(N) ** 2
    return (
        snapshot.beta[:, :, None]
        + spread * snapshot.gamma[:, :, None] * snapshot.ul_overlap[None, :, :]
    )


def ncb_interference_rewrite(
    snapshot: Snapshot, eta: EtaLike, config: SystemConfig
) -> np.ndarray:
    """
    NCB self plus inter-user interference written with vartheta.

    Uses gamma_mj beta_mk^2 / beta_mj^2 = gamma_mk for co-pilot users, so it equals
    self_interference + inter_user_interference of sinr_ncb on valid snapshots.
    """
    eta = _eta(snapshot, eta)
    rho, N = config.rho_d, snapshot.antennas
    noncoherent = rho * np.einsum("mj,mkj->k", eta, vartheta(snapshot))
    amplitude = np.sqrt(snapshot.gamma).T @ np.sqrt(eta)
    coherent = rho * alpha(N) ** 2 * np.sum(_offdiag(amplitude**2 * snapshot.ul_overlap), axis=1)
    return noncoherent + coherent


def sinr_ncb(
    snapshot: Snapshot, eta: EtaLike, config: SystemConfig, strict: bool = True
) -> SinrReport:
    """Normalized conjugate beamforming SINR (per-AP constraint sum_k eta <= 1)."""
    eta = _eta(snapshot, eta)
    check_power_constraint(snapshot, eta, Scheme.NCB, strict)
    rho, N = config.rho_d, snapshot.antennas
    beta, gamma = snapshot.beta, snapshot.gamma
    a2 = alpha(N) ** 2

    coherent = rho * a2 * np.sum(np.sqrt(eta * gamma), axis=0) ** 2
    self_interference = rho * np.sum(eta * (beta + (N - 1 - a2) * gamma), axis=0)
    ui_pairs = rho * (beta.T @ eta) + rho * upsilon(snapshot, eta) * snapshot.ul_overlap
    return _report(Scheme.NCB, coherent, self_interference, ui_pairs, config)


def theta_ecb(snapshot: Snapshot, eta: EtaLike) -> np.ndarray:
    """ECB coherent interference term with the explicit n != m double sum."""
    eta = _eta(snapshot, eta)
    beta, N = snapshot.beta, snapshot.antennas
    _require_ecb_antennas(N)
    squares = (beta**2).T @ (eta / beta**2)
    linear = beta.T @ (np.sqrt(eta) / beta)
    return (N - 2) / (N - 1) * squares + (linear**2 - squares)


def theta_rewrite(snapshot: Snapshot, eta: EtaLike) -> np.ndarray:
    """Same quantity as theta_ecb, folded into a squared sum minus a correction."""
    eta = _eta(snapshot, eta)
    beta, N = snapshot.beta, snapshot.antennas
    _require_ecb_antennas(N)
    squares = (beta**2).T @ (eta / beta**2)
    linear = beta.T @ (np.sqrt(eta) / beta)
    return linear**2 - squares / (N - 1)


def varrho(snapshot: Snapshot) -> np.ndarray:
    """M x K x K array (beta_mk / gamma_mj - beta_mk^2 / beta_mj^2 [co-pilot]) / (N - 1)."""
    N = snapshot.antennas
    _require_ecb_antennas(N)
    beta, gamma = snapshot.beta, snapshot.gamma
    ratio = beta[:, :, None] / beta[:, None, :]
    return (beta[:, :, None] / gamma[:, None, :] - ratio**2 * snapshot.ul_overlap) / (N - 1)


def ecb_interference_rewrite(
    snapshot: Snapshot, eta: EtaLike, config: SystemConfig
) -> np.ndarray:
    """ECB self plus inter-user interference written with varrho."""
    eta = _eta(snapshot, eta)
    rho, beta = config.rho_d, snapshot.beta
    noncoherent = rho * np.einsum("mj,mkj->k", eta, varrho(snapshot))
    linear = beta.T @ (np.sqrt(eta) / beta)
    coherent = rho * np.sum(_offdiag(linear**2 * snapshot.ul_overlap), axis=1)
    return noncoherent + coherent


def sinr_ecb(
    snapshot: Snapshot, eta: EtaLike, config: SystemConfig, strict: bool = True
) -> SinrReport:
    """Enhanced conjugate beamforming SINR (precoder g_hat* / |g_hat|^2)."""
    _require_ecb_antennas(snapshot.antennas)
    eta = _eta(snapshot, eta)
    check_power_constraint(snapshot, eta, Scheme.ECB, strict)
    rho, N = config.rho_d, snapshot.antennas
    beta, gamma = snapshot.beta, snapshot.gamma

    coherent = rho * np.sum(np.sqrt(eta), axis=0) ** 2
    self_interference = rho / (N - 1) * np.sum(eta * (beta / gamma - 1.0), axis=0)
    ui_pairs = rho / (N - 1) * (beta.T @ (eta / gamma)) + rho * theta_ecb(
        snapshot, eta
    ) * snapshot.ul_overlap
    return _report(Scheme.ECB, coherent, self_interference, ui_pairs, config)


def kappa(snapshot: Snapshot, eta: EtaLike, config: SystemConfig) -> np.ndarray:
    """
    Variance of the downlink-trained effective channel estimate per user.

    Args:
        snapshot: Network realization with downlink pilots
        eta: Power coefficients
        config: Provides tau_dp and rho_dp

    Returns:
        K-vector kappa_k <= N varsigma_kk
    """
    if snapshot.dl_pilot is None:
        raise ConfigError("kappa needs downlink pilots (tau_dp > 0)", key="system.tau_dp")
    eta = _eta(snapshot, eta)
    N = snapshot.antennas
    sigma = varsigma(snapshot, eta)
    own = np.diag(sigma)
    training = config.tau_dp * config.rho_dp
    return training * N**2 * own**2 / (
        1.0 + training * N * np.sum(sigma * snapshot.dl_overlap, axis=1)
    )


def sinr_cbdt(
    snapshot: Snapshot, eta: EtaLike, config: SystemConfig, strict: bool = True
) -> SinrReport:
    """CB with beamformed downlink training; pilots and data share the CB constraint."""
    eta = _eta(snapshot, eta)
    cb = sinr_cb(snapshot, eta, config, strict)
    k_vec = kappa(snapshot, eta, config)
    rho, N = config.rho_d, snapshot.antennas
    own = np.diag(varsigma(snapshot, eta))
    return _report(
        Scheme.CBDT,
        cb.coherent_gain + rho * k_vec,
        np.maximum(rho * (N * own - k_vec), 0.0),
        cb.ui_pairs,
        config,
        kappa=k_vec,
    )


_EVALUATORS = {
    Scheme.CB: sinr_cb,
    Scheme.NCB: sinr_ncb,
    Scheme.ECB: sinr_ecb,
    Scheme.CBDT: sinr_cbdt,
}


def evaluate(
    snapshot: Snapshot,
    eta: EtaLike,
    scheme: Scheme,
    config: SystemConfig,
    strict: bool = True,
) -> SinrReport:
    """Dispatch to the closed-form evaluator of the scheme."""
    return _EVALUATORS[Scheme.parse(scheme)](snapshot, eta, config, strict)


def effective_channel_mean(snapshot: Snapshot, eta: EtaLike) -> np.ndarray:
    """CB: K x K means E[a_kj] (zero unless k and j share an uplink pilot)."""
    eta = _eta(snapshot, eta)
    N = snapshot.antennas
    return N * coherent_contamination(snapshot, eta) * snapshot.ul_overlap


def effective_channel_power(snapshot: Snapshot, eta: EtaLike) -> np.ndarray:
    """CB: K x K second moments E|a_kj|^2 (unscaled by rho_d)."""
    eta = _eta(snapshot, eta)
    N = snapshot.antennas
    return N * varsigma(snapshot, eta) + effective_channel_mean(snapshot, eta) ** 2


def maximal_ratio_power(
    snapshot: Snapshot, scheme: Scheme, N: Optional[int] = None, full_sum: bool = False
) -> PowerAllocation:
    """
    Maximal-ratio power control.

    Each AP spends its full budget on the users it serves, in proportion to the
    estimate quality. Coefficients are zero outside the AP clusters.

    Args:
        snapshot: Network realization
        scheme: Scheme whose per-AP constraint the allocation meets with equality
        N: Antennas per AP (defaults to the snapshot's)
        full_sum: Normalize by gamma summed over all users instead of served users

    Returns:
        PowerAllocation for the scheme
    """
    scheme = Scheme.parse(scheme)
    N = snapshot.antennas if N is None else N
    mask = snapshot.cluster_mask
    gamma = snapshot.gamma

    served = gamma if full_sum else gamma * mask
    denom = N * np.sum(served, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.where(mask & (denom > 0), 1.0 / denom, 0.0)

    if scheme in (Scheme.NCB, Scheme.ECB):
        eta = N * gamma * eta
    if scheme is Scheme.ECB:
        _require_ecb_antennas(N)
        eta = (N - 1) * gamma * eta
    return PowerAllocation(eta, scheme)


def hardening_metrics(report: SinrReport) -> Tuple[np.ndarray, np.ndarray]:
    """
    Channel hardening metrics BU/DS and UI/DS in dB.

    Zero self-interference maps to -inf; users with zero coherent gain get NaN and
    a warning.
    """
    coherent = report.coherent_gain
    with np.errstate(divide="ignore", invalid="ignore"):
        bu_ds = 10.0 * np.log10(report.self_interference / coherent)
        ui_ds = 10.0 * np.log10(report.inter_user_interference / coherent)
    undefined = coherent <= 0
    if np.any(undefined):
        logger.warning(
            f"{report.scheme.value}: hardening metrics undefined for users "
            f"{np.flatnonzero(undefined).tolist()} (zero coherent gain)"
        )
        bu_ds = np.where(undefined, np.nan, bu_ds)
        ui_ds = np.where(undefined, np.nan, ui_ds)
    return bu_ds, ui_ds
