"""
Network snapshot generation: geometry, large-scale fading, AP clustering, pilots.

Every random draw is taken from its own child of a SeedSequence, so a snapshot is a
pure function of (config, seed).
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .estimation import SeedLike, compute_c, compute_gamma, pilot_overlap
from .exceptions import PilotAssignmentError, ScenarioError
from .models import Geometry, Snapshot, SystemConfig

logger = logging.getLogger("cellfree_sim")

SHADOW_JITTER = 1e-10


def _seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(2**63)))
    return np.random.SeedSequence(seed)


def wraparound_distance(a: np.ndarray, b: np.ndarray, side: float) -> np.ndarray:
    """Pairwise planar distances on a side x side torus, shape (len(a), len(b))."""
    delta = np.abs(np.asarray(a, dtype=float)[:, None, :] - np.asarray(b, dtype=float)[None, :, :])
    delta = np.mod(delta, side)
    delta = np.minimum(delta, side - delta)
    return np.sqrt(np.sum(delta**2, axis=-1))


def geometry_from_positions(ap_xy, user_xy, config: SystemConfig) -> Geometry:
    """
    Build a Geometry from planar AP and user positions.

    Args:
        ap_xy: M x 2 AP coordinates (m)
        user_xy: K x 2 user coordinates (m)
        config: Provides the area side and antenna heights

    Returns:
        Geometry with wraparound distance matrices
    """
    ap_xy = np.atleast_2d(np.asarray(ap_xy, dtype=float))
    user_xy = np.atleast_2d(np.asarray(user_xy, dtype=float))
    planar = wraparound_distance(ap_xy, user_xy, config.D)
    height = config.ap_height - config.user_height
    return Geometry(
        ap_pos=ap_xy,
        user_pos=user_xy,
        ap_height=config.ap_height,
        user_height=config.user_height,
        d_ap_user=np.sqrt(planar**2 + height**2),
        d_ap_ap=wraparound_distance(ap_xy, ap_xy, config.D),
        d_user_user=wraparound_distance(user_xy, user_xy, config.D),
        side=config.D,
    )


def generate_geometry(config: SystemConfig, seed: SeedLike) -> Geometry:
    """Drop APs and users uniformly at random over the D x D area."""
    rng = np.random.default_rng(seed)
    ap_xy = rng.uniform(0.0, config.D, size=(config.M, 2))
    user_xy = rng.uniform(0.0, config.D, size=(config.K, 2))
    return geometry_from_positions(ap_xy, user_xy, config)


def compute_pathloss(geom: Geometry) -> np.ndarray:
    """Urban microcell pathloss in dB, -30.5 - 36.7 log10(d / 1 m)."""
    d = geom.d_ap_user
    if np.any(d <= 0):
        raise ScenarioError("AP-user distances must be positive for the pathloss model")
    return -30.5 - 36.7 * np.log10(d)


def _correlated_normal(distance: np.ndarray, decorr_dist: float, rng: np.random.Generator):
    cov = np.power(2.0, -distance / decorr_dist)
    cov = cov + SHADOW_JITTER * np.eye(cov.shape[0])
    try:
        factor = scipy.linalg.cholesky(cov, lower=True)
    except np.linalg.LinAlgError as e:
        raise ScenarioError(f"shadowing covariance is not positive definite: {e}") from e
    return factor @ rng.standard_normal(cov.shape[0])


def sample_shadowing(geom: Geometry, config: SystemConfig, seed: SeedLike) -> np.ndarray:
    """
    Spatially correlated shadowing q_mk = sqrt(eps) a_m + sqrt(1 - eps) b_k.

    Args:
        geom: Geometry providing AP-AP and user-user distances
        config: Provides epsilon and the decorrelation distance
        seed: Seed for the AP and user components

    Returns:
        M x K matrix of unit-variance shadowing terms
    """
    ap_stream, user_stream = _seed_sequence(seed).spawn(2)
    a = _correlated_normal(geom.d_ap_ap, config.decorr_dist, np.random.default_rng(ap_stream))
    b = _correlated_normal(geom.d_user_user, config.decorr_dist, np.random.default_rng(user_stream))
    return np.sqrt(config.epsilon) * a[:, None] + np.sqrt(1.0 - config.epsilon) * b[None, :]


def compute_beta(pathloss_db: np.ndarray, q: np.ndarray, sigma_sh: float) -> np.ndarray:
    """Large-scale fading beta_mk from pathloss (dB) and shadowing."""
    pathloss_db = np.asarray(pathloss_db, dtype=float)
    q = np.asarray(q, dtype=float)
    if pathloss_db.shape != q.shape:
        raise ValueError(f"pathloss {pathloss_db.shape} and shadowing {q.shape} shapes differ")
    return np.power(10.0, pathloss_db / 10.0) * np.power(10.0, sigma_sh * q / 10.0)


def select_ap_clusters(
    beta: np.ndarray, cluster_threshold: float, cluster_min: int
) -> Tuple[Tuple[int, ...], ...]:
    """
    Largest-large-scale-fading AP selection.

    For each user the strongest APs are taken until they capture cluster_threshold of
    the user's total beta, then padded with the next strongest up to cluster_min.
    Ties go to the lower AP index.
    """
    beta = np.asarray(beta, dtype=float)
    M = beta.shape[0]
    if cluster_min > M:
        raise ScenarioError(f"cluster_min ({cluster_min}) exceeds the number of APs ({M})")

    clusters = []
    for column in beta.T:
        order = np.argsort(-column, kind="stable")
        share = np.cumsum(column[order]) / column.sum()
        size = int(np.searchsorted(share, cluster_threshold - 1e-12)) + 1
        size = min(max(size, cluster_min), M)
        clusters.append(tuple(sorted(int(m) for m in order[:size])))
    return tuple(clusters)


def assign_uplink_pilots(K: int, tau_up: int, seed: SeedLike, orthogonal: bool = False):
    """Random uplink pilot indices; orthogonal mode hands out distinct indices."""
    if tau_up < 1:
        raise ScenarioError(f"tau_up must be >= 1, got {tau_up}")
    rng = np.random.default_rng(seed)
    if orthogonal:
        if tau_up < K:
            raise PilotAssignmentError(
                f"orthogonal uplink pilots need tau_up >= K ({tau_up} < {K})", range(K)
            )
        return rng.permutation(tau_up)[:K]
    return rng.integers(0, tau_up, size=K)


def assign_downlink_pilots(ul_pilot, tau_dp: int, seed: SeedLike, distinct: bool = False):
    """
    Downlink pilot indices keeping co-uplink-pilot users on distinct pilots.

    Args:
        ul_pilot: K uplink pilot indices
        tau_dp: Downlink pilot length
        seed: Seed for the assignment
        distinct: Hand out all-distinct pilots (implied when tau_dp >= K)

    Returns:
        K downlink pilot indices in {0..tau_dp-1}

    Raises:
        PilotAssignmentError: If a co-pilot group is larger than tau_dp
    """
    ul_pilot = np.asarray(ul_pilot)
    K = ul_pilot.size
    rng = np.random.default_rng(seed)

    if distinct or tau_dp >= K:
        if tau_dp < K:
            raise PilotAssignmentError(
                f"all-distinct downlink pilots need tau_dp >= K ({tau_dp} < {K})", range(K)
            )
        return rng.permutation(tau_dp)[:K]

    dl_pilot = np.empty(K, dtype=int)
    for pilot in np.unique(ul_pilot):
        group = np.flatnonzero(ul_pilot == pilot)
        if group.size > tau_dp:
            raise PilotAssignmentError(
                f"users {group.tolist()} share uplink pilot {int(pilot)} but only "
                f"{tau_dp} downlink pilots exist",
                group,
            )
        dl_pilot[group] = rng.choice(tau_dp, size=group.size, replace=False)
    return dl_pilot


def snapshot_from_fading(
    beta: np.ndarray,
    ul_pilot,
    config: SystemConfig,
    dl_pilot=None,
    clusters: Optional[Sequence[Sequence[int]]] = None,
    geometry: Optional[Geometry] = None,
) -> Snapshot:
    """
    Assemble a Snapshot from given large-scale fading and pilot indices.

    Clusters default to the AP selection rule of the config.
    """
    beta = np.asarray(beta, dtype=float)
    c = compute_c(beta, ul_pilot, config.tau_up, config.rho_u)
    gamma = compute_gamma(c, beta, config.tau_up, config.rho_u)
    if clusters is None:
        clusters = select_ap_clusters(beta, config.cluster_threshold, config.cluster_min)
    return Snapshot(
        beta=beta,
        c=c,
        gamma=gamma,
        ul_pilot=np.asarray(ul_pilot),
        dl_pilot=None if dl_pilot is None else np.asarray(dl_pilot),
        clusters=clusters,
        antennas=config.N,
        geometry=geometry,
    )


def build_snapshot(config: SystemConfig, seed: SeedLike) -> Snapshot:
    """
    Generate one complete network realization.

    Args:
        config: Validated system parameters
        seed: Master seed or per-snapshot SeedSequence

    Returns:
        Snapshot satisfying all estimation and pilot invariants
    """
    geom_seed, shadow_seed, ul_seed, dl_seed = _seed_sequence(seed).spawn(4)

    geom = generate_geometry(config, geom_seed)
    q = sample_shadowing(geom, config, shadow_seed)
    beta = compute_beta(compute_pathloss(geom), q, config.sigma_sh)

    ul_pilot = assign_uplink_pilots(config.K, config.tau_up, ul_seed, config.orthogonal_uplink)
    dl_pilot = None
    if config.downlink_training:
        dl_pilot = assign_downlink_pilots(ul_pilot, config.tau_dp, dl_seed)

    snapshot = snapshot_from_fading(beta, ul_pilot, config, dl_pilot=dl_pilot, geometry=geom)
    logger.debug(
        f"Snapshot built: M={config.M} K={config.K} "
        f"co-pilot pairs={int((pilot_overlap(ul_pilot).sum() - config.K) // 2)}"
    )
    return snapshot


def restrict_snapshot(snapshot: Snapshot, aps, users, config: SystemConfig) -> Snapshot:
    """
    Sub-network of the given APs and users.

    c and gamma are recomputed so they match the pilots still present; every user
    is served by all retained APs.
    """
    aps = np.asarray(aps, dtype=int)
    users = np.asarray(users, dtype=int)
    beta = snapshot.beta[np.ix_(aps, users)]
    ul_pilot = snapshot.ul_pilot[users]
    dl_pilot = None if snapshot.dl_pilot is None else snapshot.dl_pilot[users]
    clusters = [tuple(range(aps.size))] * users.size
    return snapshot_from_fading(beta, ul_pilot, config, dl_pilot=dl_pilot, clusters=clusters)
