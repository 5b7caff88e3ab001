"""
Data models for the cell-free conjugate beamforming simulator.

Arrays held by the frozen models are copied and marked read-only on construction,
so a Snapshot can be shared between worker threads.
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, SolverError


class Scheme(str, Enum):
    """Conjugate beamforming variant."""

    CB = "CB"
    NCB = "NCB"
    ECB = "ECB"
    CBDT = "CBDT"

    @classmethod
    def parse(cls, value: "str | Scheme") -> "Scheme":
        try:
            text = value.value if isinstance(value, Enum) else str(value)
            return cls(text.upper().replace("-", ""))
        except ValueError as e:
            raise ConfigError(f"unknown scheme '{value}'", key="experiment.schemes") from e


class PowerPolicy(str, Enum):
    """Power control policy applied to every snapshot."""

    MAXIMAL_RATIO = "maximal_ratio"
    MMF = "mmf"


def _readonly(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _overlap(indices: np.ndarray) -> np.ndarray:
    return (indices[:, None] == indices[None, :]).astype(float)


def snr_from_dbm(power_dbm: float, noise_dbm: float) -> float:
    """Linear SNR of a transmit power normalized by the noise power."""
    return 10.0 ** ((power_dbm - noise_dbm) / 10.0)


def mw_to_dbm(power_mw: float) -> float:
    return 10.0 * math.log10(power_mw)


DEFAULT_NOISE_DBM = -92.0
DEFAULT_RHO_D = snr_from_dbm(mw_to_dbm(200.0), DEFAULT_NOISE_DBM)
DEFAULT_RHO_U = snr_from_dbm(mw_to_dbm(100.0), DEFAULT_NOISE_DBM)


@dataclass(frozen=True)
class SystemConfig:
    """Scalar parameters of the scenario and radio model."""

    M: int = 200
    N: int = 8
    K: int = 40
    D: float = 500.0
    tau_c: int = 200
    tau_up: int = 20
    tau_dp: int = 20
    xi: float = 0.5
    rho_d: float = DEFAULT_RHO_D
    rho_dp: float = DEFAULT_RHO_D
    rho_u: float = DEFAULT_RHO_U
    sigma_sh: float = 4.0
    epsilon: float = 0.5
    ap_height: float = 10.0
    user_height: float = 1.5
    decorr_dist: float = 9.0
    cluster_threshold: float = 0.95
    cluster_min: int = 10
    noise_dbm: float = DEFAULT_NOISE_DBM
    seed: int = 0
    orthogonal_uplink: bool = False
    mr_full_sum: bool = False

    def __post_init__(self):
        """Validate invariants; the key path is reported on failure."""
        for name in ("M", "N", "K", "tau_c", "tau_up", "cluster_min"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", key=f"system.{name}")
        if self.tau_dp < 0:
            raise ConfigError(f"must be >= 0, got {self.tau_dp}", key="system.tau_dp")
        if self.M * self.N < self.K:
            raise ConfigError(
                f"M*N must be >= K, got M*N={self.M * self.N}, K={self.K}", key="system.K"
            )
        if not 0.0 < self.xi < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.xi}", key="system.xi")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.epsilon}", key="system.epsilon")
        if self.tau_up > self.tau_c:
            raise ConfigError(
                f"tau_up ({self.tau_up}) must not exceed tau_c ({self.tau_c})", key="system.tau_up"
            )
        if self.tau_up + self.tau_dp >= self.tau_c:
            raise ConfigError(
                f"tau_up + tau_dp ({self.tau_up + self.tau_dp}) must be < tau_c ({self.tau_c})",
                key="system.tau_dp",
            )
        for name in ("rho_d", "rho_dp", "rho_u", "D", "decorr_dist"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"must be > 0, got {getattr(self, name)}", key=f"system.{name}")
        if self.sigma_sh < 0:
            raise ConfigError(f"must be >= 0, got {self.sigma_sh}", key="system.sigma_sh")
        if not 0.0 < self.cluster_threshold <= 1.0:
            raise ConfigError(
                f"must lie in (0, 1], got {self.cluster_threshold}", key="system.cluster_threshold"
            )
        if self.cluster_min > self.M:
            raise ConfigError(
                f"cluster_min ({self.cluster_min}) must not exceed M ({self.M})",
                key="system.cluster_min",
            )
        if self.orthogonal_uplink and self.tau_up < self.K:
            raise ConfigError(
                f"orthogonal uplink pilots need tau_up >= K, got {self.tau_up} < {self.K}",
                key="system.orthogonal_uplink",
            )

    @property
    def downlink_training(self) -> bool:
        """Whether CB-DT can be evaluated (tau_dp > 0)."""
        return self.tau_dp > 0


@dataclass(frozen=True)
class Geometry:
    """AP and user positions with torus-wraparound distance matrices."""

    ap_pos: np.ndarray
    user_pos: np.ndarray
    ap_height: float
    user_height: float
    d_ap_user: np.ndarray
    d_ap_ap: np.ndarray
    d_user_user: np.ndarray
    side: float

    def __post_init__(self):
        for name in ("ap_pos", "user_pos", "d_ap_user", "d_ap_ap", "d_user_user"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        M, K = self.ap_pos.shape[0], self.user_pos.shape[0]
        if self.d_ap_user.shape != (M, K):
            raise ValueError(f"d_ap_user must be {M}x{K}, got {self.d_ap_user.shape}")
        if self.d_ap_ap.shape != (M, M) or self.d_user_user.shape != (K, K):
            raise ValueError("AP-AP and user-user distance matrices must be square")


@dataclass(frozen=True)
class Snapshot:
    """One network realization: fading, estimation statistics, pilots, clusters."""

    beta: np.ndarray
    c: np.ndarray
    gamma: np.ndarray
    ul_pilot: np.ndarray
    clusters: Tuple[Tuple[int, ...], ...]
    antennas: int
    dl_pilot: Optional[np.ndarray] = None
    geometry: Optional[Geometry] = None

    def __post_init__(self):
        object.__setattr__(self, "beta", _readonly(self.beta))
        object.__setattr__(self, "c", _readonly(self.c))
        object.__setattr__(self, "gamma", _readonly(self.gamma))
        object.__setattr__(self, "ul_pilot", _readonly(self.ul_pilot, dtype=int))
        if self.dl_pilot is not None:
            object.__setattr__(self, "dl_pilot", _readonly(self.dl_pilot, dtype=int))
        object.__setattr__(
            self, "clusters", tuple(tuple(sorted(int(m) for m in ck)) for ck in self.clusters)
        )

        M, K = self.beta.shape
        if self.c.shape != (M, K) or self.gamma.shape != (M, K):
            raise ValueError("beta, c and gamma must share one MxK shape")
        if self.ul_pilot.shape != (K,) or len(self.clusters) != K:
            raise ValueError("ul_pilot and clusters need one entry per user")
        if np.any(self.beta <= 0) or np.any(self.gamma <= 0):
            raise ValueError("beta and gamma must be strictly positive")
        if np.any(self.gamma > self.beta * (1.0 + 1e-12)):
            raise ValueError("gamma must not exceed beta")
        if self.antennas < 1:
            raise ValueError("antennas must be >= 1")
        if self.dl_pilot is not None:
            if self.dl_pilot.shape != (K,):
                raise ValueError("dl_pilot needs one entry per user")
            clash = self.ul_overlap * self.dl_overlap - np.eye(K)
            if np.any(clash > 0):
                raise ValueError("co-pilot users must hold distinct downlink pilots")

    @property
    def M(self) -> int:
        return self.beta.shape[0]

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    @property
    def ul_overlap(self) -> np.ndarray:
        """K x K matrix of |phi_k^H phi_j|^2 in {0, 1}."""
        return _overlap(self.ul_pilot)

    @property
    def dl_overlap(self) -> np.ndarray:
        """K x K matrix of |psi_k^H psi_j|^2 in {0, 1}."""
        if self.dl_pilot is None:
            raise ValueError("snapshot has no downlink pilots")
        return _overlap(self.dl_pilot)

    @property
    def cluster_mask(self) -> np.ndarray:
        """M x K boolean mask, True where AP m serves user k."""
        mask = np.zeros((self.M, self.K), dtype=bool)
        for k, members in enumerate(self.clusters):
            mask[list(members), k] = True
        return mask


@dataclass(frozen=True)
class ChannelDraw:
    """True channels and (optionally) their MMSE estimates.

    Arrays have shape (..., M, K, N); a leading axis indexes trials.
    """

    g: np.ndarray
    g_hat: Optional[np.ndarray] = None

    @property
    def g_tilde(self) -> np.ndarray:
        if self.g_hat is None:
            raise ValueError("channel draw carries no estimates")
        return self.g - self.g_hat


@dataclass(frozen=True)
class PowerAllocation:
    """Power control coefficients eta (M x K) for one scheme."""

    eta: np.ndarray
    scheme: Scheme

    def __post_init__(self):
        object.__setattr__(self, "eta", _readonly(self.eta))
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if self.eta.ndim != 2:
            raise ValueError("eta must be an M x K matrix")
        if not np.all(np.isfinite(self.eta)) or np.any(self.eta < 0):
            raise ValueError("eta must be finite and nonnegative")

    def scaled(self, factor: float) -> "PowerAllocation":
        return PowerAllocation(self.eta * factor, self.scheme)


@dataclass(frozen=True)
class SinrReport:
    """Per-user closed-form SINR decomposition for one scheme."""

    scheme: Scheme
    coherent_gain: np.ndarray
    self_interference: np.ndarray
    inter_user_interference: np.ndarray
    ui_pairs: np.ndarray
    sinr: np.ndarray
    se: np.ndarray
    gross_se: np.ndarray
    overhead: float
    kappa: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("coherent_gain", "self_interference", "inter_user_interference", "sinr"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} must be nonnegative")

    @property
    def min_se(self) -> float:
        return float(np.min(self.se))


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo estimate with its standard error."""

    quantity: str
    estimate: np.ndarray
    standard_error: np.ndarray
    trials: int

    def __post_init__(self):
        if self.trials < 2:
            raise ValueError(f"McEstimate needs >= 2 trials, got {self.trials}")
        object.__setattr__(self, "estimate", np.asarray(self.estimate, dtype=float))
        object.__setattr__(self, "standard_error", np.asarray(self.standard_error, dtype=float))


@dataclass(frozen=True)
class SocProblem:
    """Second-order cone data encoding SINR_k >= nu under per-AP power budgets.

    Coefficients act on u_mk = sqrt(rho_d * eta_mk):
      signal[k] . u_k                        useful amplitude of user k
      cross[k, j] . u_j  (j != k)            coherent contamination from user j
      || noncoherent[k, j] * u_j ||          non-coherent interference (all j)
      || budget_weights[m] * u'_m || <= budget_bound  per AP m
    """

    scheme: Scheme
    rho_d: float
    signal: np.ndarray
    cross: np.ndarray
    noncoherent: np.ndarray
    budget_weights: np.ndarray
    budget_bound: float
    support: np.ndarray
    mr_eta: np.ndarray

    def __post_init__(self):
        for name in ("signal", "cross", "noncoherent", "budget_weights", "mr_eta"):
            values = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(values)):
                raise SolverError(f"SOC coefficient '{name}' is not finite")
            if np.any(values < 0):
                raise SolverError(f"SOC coefficient '{name}' is negative")
            object.__setattr__(self, name, _readonly(values))
        object.__setattr__(self, "support", _readonly(self.support, dtype=bool))
        if not (math.isfinite(self.budget_bound) and self.budget_bound > 0):
            raise SolverError("SOC budget bound must be positive and finite")

    @property
    def M(self) -> int:
        return self.budget_weights.shape[0]

    @property
    def K(self) -> int:
        return self.budget_weights.shape[1]


@dataclass(frozen=True)
class MmfSolution:
    """Outcome of max-min fairness bisection."""

    scheme: Scheme
    eta: np.ndarray
    nu: float
    target: float
    iterations: int
    feas_tol: float
    bisect_tol: float
    undecided: int = 0
    extension: bool = False

    def allocation(self) -> PowerAllocation:
        return PowerAllocation(self.eta, self.scheme)


@dataclass(frozen=True)
class MmfAudit:
    """Optimality audit of an MMF allocation."""

    scheme: Scheme
    min_sinr: float
    max_sinr: float
    spread_ok: bool
    constraints_ok: bool
    support_ok: bool
    target_ok: bool = True

    @property
    def passed(self) -> bool:
        return self.spread_ok and self.constraints_ok and self.support_ok and self.target_ok


@dataclass
class ExperimentSpec:
    """Everything one experiment run needs."""

    system: SystemConfig = field(default_factory=SystemConfig)
    schemes: Tuple[Scheme, ...] = (Scheme.CB, Scheme.NCB, Scheme.ECB, Scheme.CBDT)
    power_policy: PowerPolicy = PowerPolicy.MAXIMAL_RATIO
    snapshots: int = 200
    sweep: Optional[Tuple[str, Tuple[float, ...]]] = None
    outputs: Dict[str, str] = field(default_factory=dict)
    oracle: Optional[Dict[str, Any]] = None
    mmf: Dict[str, Any] = field(default_factory=dict)
    workers: int = 1
    preset: Optional[str] = None

    def __post_init__(self):
        """Validate cross-field rules (schemes, sweep and policy)."""
        self.schemes = tuple(Scheme.parse(s) for s in self.schemes)
        self.power_policy = PowerPolicy(self.power_policy)
        if not self.schemes:
            raise ConfigError("at least one scheme is required", key="experiment.schemes")
        if self.snapshots < 1:
            raise ConfigError(f"must be >= 1, got {self.snapshots}", key="experiment.snapshots")
        if self.workers < 1:
            raise ConfigError(f"must be >= 1, got {self.workers}", key="experiment.workers")
        if self.power_policy is PowerPolicy.MMF and Scheme.CBDT in self.schemes:
            raise ConfigError(
                "MMF power control is not available for CBDT; drop CBDT or use maximal_ratio",
                key="experiment.power_policy",
            )
        if Scheme.CBDT in self.schemes:
            for cfg in self.systems():
                if not cfg.downlink_training:
                    raise ConfigError("CBDT requires tau_dp > 0", key="system.tau_dp")
        if Scheme.ECB in self.schemes:
            for cfg in self.systems():
                if cfg.N < 2:
                    raise ConfigError(
                        f"ECB requires N >= 2 (got N={cfg.N}); E[1/|g_hat|^2] diverges at N=1",
                        key="system.N",
                    )

    def systems(self) -> List[SystemConfig]:
        """One SystemConfig per sweep point (just the base config without a sweep)."""
        if self.sweep is None:
            return [self.system]
        name, values = self.sweep
        try:
            kind = type(getattr(self.system, name))
            return [replace(self.system, **{name: kind(v)}) for v in values]
        except ConfigError as e:
            raise ConfigError(str(e), key="experiment.sweep") from e


@dataclass(frozen=True)
class CdfRow:
    scheme: str
    metric: str
    value: float
    cdf: float


@dataclass
class CdfTable:
    """Empirical CDF rows grouped by (scheme, metric) plus run metadata."""

    rows: List[CdfRow] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        """Validate ordering: values ascending and cdf non-decreasing per group."""
        last: Dict[Tuple[str, str], CdfRow] = {}
        for row in self.rows:
            if not 0.0 <= row.cdf <= 1.0:
                raise ValueError(f"cdf must lie in [0, 1], got {row.cdf}")
            prev = last.get((row.scheme, row.metric))
            if prev is not None and (row.value < prev.value or row.cdf < prev.cdf):
                raise ValueError(f"rows of ({row.scheme}, {row.metric}) are not sorted")
            last[(row.scheme, row.metric)] = row

    def groups(self) -> Dict[Tuple[str, str], np.ndarray]:
        out: Dict[Tuple[str, str], list] = {}
        for row in self.rows:
            out.setdefault((row.scheme, row.metric), []).append(row.value)
        return {key: np.array(values) for key, values in out.items()}
