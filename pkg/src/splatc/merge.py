"""Voxel-based merging of geometrically similar Gaussian primitives.

A merge pass selects low-gradient primitives inside a keyframe window, bins
them into voxels, gates every within-voxel pair by squared Mahalanobis
distance, and fuses each accepted pair into one primitive: the mean is the
precision-weighted product-of-Gaussians peak, the covariance is the
Wasserstein-2 barycenter found by L-BFGS over (quaternion, scale), and
color/opacity come from the older parent.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ._parallel import worker_count
from .core import (
    EPS_SCALE,
    DegenerateCovarianceError,
    GaussianPrimitive,
    SplatMap,
    covariance_from_qs,
    normalize_quaternion,
    quat_to_rotmat,
)
from .optim import MinimizerConfig, NumericalFailure, minimize, slerp

log = logging.getLogger(__name__)

GRAD_TAU = 0.001
CHI2_3DOF_95 = 7.815
SLERP_T = 0.5
EVD_OFFSETS = (0.001, 0.002, 0.003)
KF_MAX_DEFAULT = 2**31 - 1


@dataclass(frozen=True)
class MergeConfig:
    voxel_size: float = 0.05
    grad_tau: float = GRAD_TAU
    chi2_threshold: float = CHI2_3DOF_95
    slerp_t: float = SLERP_T
    evd_offsets: tuple[float, float, float] = EVD_OFFSETS
    kf_window: tuple[int, int] = (0, KF_MAX_DEFAULT)
    symmetric_gate: bool = False
    minimizer: MinimizerConfig = field(default_factory=MinimizerConfig)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not 0 < self.slerp_t < 1:
            raise ValueError("slerp_t must lie in (0, 1)")
        if not self.chi2_threshold > 0:
            raise ValueError("chi2_threshold must be positive")
        if len(self.evd_offsets) != 3:
            raise ValueError("evd_offsets needs three values")
        if self.kf_window[0] > self.kf_window[1]:
            raise ValueError("kf_window must satisfy K_min <= K_max")
        object.__setattr__(self, "evd_offsets", tuple(float(d) for d in self.evd_offsets))
        object.__setattr__(self, "kf_window", tuple(int(k) for k in self.kf_window))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["evd_offsets"] = list(self.evd_offsets)
        d["kf_window"] = list(self.kf_window)
        return d


class MergeCandidate(NamedTuple):
    index_i: int
    index_j: int
    d2: float


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

def stability_mask(splats: SplatMap, cfg: MergeConfig) -> np.ndarray:
    if len(splats) == 0:
        return np.zeros(0, dtype=bool)
    a = splats.arrays()
    k_min, k_max = cfg.kf_window
    return (a.grad_stats < cfg.grad_tau) & (a.keyframe_indices >= k_min) & (a.keyframe_indices <= k_max)


def voxel_index(mean, voxel_size: float) -> tuple[int, int, int]:
    ix, iy, iz = np.floor(np.asarray(mean, dtype=np.float64) / voxel_size).astype(np.int64)
    return int(ix), int(iy), int(iz)


def bin_voxels(splats: SplatMap, mask, voxel_size: float) -> dict[tuple[int, int, int], list[int]]:
    """Group masked primitives by voxel.

    Returns positions into ``splats.primitives``; each voxel's list is ordered
    by insertion index.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    bins: dict[tuple[int, int, int], list[int]] = {}
    for pos in np.flatnonzero(np.asarray(mask, dtype=bool)):
        bins.setdefault(voxel_index(splats[pos].mean, voxel_size), []).append(int(pos))
    for members in bins.values():
        members.sort(key=lambda pos: splats[pos].insertion_index)
    return bins


# ---------------------------------------------------------------------------
# pair metrics
# ---------------------------------------------------------------------------

def _cho(cov):
    try:
        return cho_factor(np.asarray(cov, dtype=np.float64), lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise DegenerateCovarianceError(f"covariance is not positive definite: {exc}") from exc


def mahalanobis_sq(mu_j, mu_i, cov_i) -> float:
    diff = np.asarray(mu_j, dtype=np.float64) - np.asarray(mu_i, dtype=np.float64)
    return max(float(diff @ cho_solve(_cho(cov_i), diff)), 0.0)


def gate(candidate: MergeCandidate, chi2_threshold: float = CHI2_3DOF_95) -> bool:
    return candidate.d2 < chi2_threshold


def enumerate_candidates(members: Sequence[GaussianPrimitive], symmetric: bool = False) -> list[MergeCandidate]:
    """All unordered pairs of one voxel's members (sorted by insertion index)."""
    covs = [m.covariance for m in members]
    out = []
    for a in range(len(members)):
        for b in range(a + 1, len(members)):
            gi, gj = members[a], members[b]
            d2 = mahalanobis_sq(gj.mean, gi.mean, covs[a])
            if symmetric:
                d2 = min(d2, mahalanobis_sq(gi.mean, gj.mean, covs[b]))
            out.append(MergeCandidate(gi.insertion_index, gj.insertion_index, d2))
    return out


def merge_mean(mu_i, cov_i, mu_j, cov_j) -> np.ndarray:
    """Peak of the product of two Gaussians: ``(P_i + P_j)^-1 (P_i mu_i + P_j mu_j)``."""
    mu_i = np.asarray(mu_i, dtype=np.float64)
    mu_j = np.asarray(mu_j, dtype=np.float64)
    ci, cj = _cho(cov_i), _cho(cov_j)
    precision_sum = cho_solve(ci, np.eye(3)) + cho_solve(cj, np.eye(3))
    rhs = cho_solve(ci, mu_i) + cho_solve(cj, mu_j)
    return cho_solve(_cho(0.5 * (precision_sum + precision_sum.T)), rhs)


# ---------------------------------------------------------------------------
# Wasserstein-2 covariance fusion
# ---------------------------------------------------------------------------

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    lam, V = np.linalg.eigh(0.5 * (m + m.T))
    return (V * np.sqrt(np.maximum(lam, 0.0))) @ V.T


def w2_sq(cov_k, cov_i) -> float:
    """Squared 2-Wasserstein distance between zero-mean Gaussians."""
    cov_k = np.asarray(cov_k, dtype=np.float64)
    cov_i = np.asarray(cov_i, dtype=np.float64)
    try:
        root_k = _sqrtm_psd(cov_k)
        cross = _sqrtm_psd(root_k @ cov_i @ root_k)
    except LinAlgError as exc:
        raise NumericalFailure(f"eigendecomposition failed: {exc}", cov_k, np.nan) from exc
    val = float(np.trace(cov_k) + np.trace(cov_i) - 2.0 * np.trace(cross))
    return max(val, 0.0)


# derivative of the rotation matrix w.r.t. each quaternion component (w, x, y, z)
def _drot_dq(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return 2.0 * np.array(
        [
            [[0, -z, y], [z, 0, -x], [-y, x, 0]],
            [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
        ]
    )


def w2_objective(params, targets: Sequence[np.ndarray]) -> tuple[float, np.ndarray]:
    """Sum of squared W2 distances from ``Sigma(q, s)`` to each target, with its gradient.

    ``params`` is ``(q_w, q_x, q_y, q_z, s_0, s_1, s_2)``; ``q`` need not be
    unit (it is normalized inside) and ``s`` must be positive.
    """
    params = np.asarray(params, dtype=np.float64)
    q_raw, s = params[:4], params[4:]
    qn = np.linalg.norm(q_raw)
    q = q_raw / qn
    R = quat_to_rotmat(q)
    M = R * s
    cov_k = M @ M.T
    root_k = (R * s) @ R.T
    inv_root_k = (R / s) @ R.T

    f = 0.0
    G = np.zeros((3, 3))
    for cov_x in targets:
        lam, V = np.linalg.eigh(root_k @ cov_x @ root_k)
        cross = (V * np.sqrt(np.maximum(lam, 0.0))) @ V.T
        f += np.trace(cov_k) + np.trace(cov_x) - 2.0 * np.trace(cross)
        # optimal transport map from N(0, cov_k) to N(0, cov_x)
        T = inv_root_k @ cross @ inv_root_k
        G += np.eye(3) - 0.5 * (T + T.T)

    dM = 2.0 * G @ M
    grad_s = np.einsum("ra,ra->a", R, dM)
    dR = dM * s
    grad_qn = np.einsum("kab,ab->k", _drot_dq(q), dR)
    grad_q = (grad_qn - q * (q @ grad_qn)) / qn
    return float(f), np.concatenate([grad_q, grad_s])


class CovarianceMerge(NamedTuple):
    rotation: np.ndarray
    scale: np.ndarray
    covariance: np.ndarray
    objective: float
    initial_objective: float
    iterations: int
    converged: bool
    fallback: bool


def merge_covariance(cov_i, cov_j, q_i, s_i, q_j, s_j, cfg: MergeConfig | None = None) -> CovarianceMerge:
    """Fuse two covariances into their W2 barycenter.

    Starts from the slerped rotation and the averaged-plus-offset scale, then
    runs L-BFGS over (quaternion, scale). The problem is solved in units
    where the mean parent scale is 1 (W2^2 is homogeneous in the covariance),
    so the minimizer tolerances are relative to the primitives' size.
    On a numerical failure the starting values are returned with
    ``fallback=True``.
    """
    cfg = cfg or MergeConfig()
    cov_i = np.asarray(cov_i, dtype=np.float64)
    cov_j = np.asarray(cov_j, dtype=np.float64)
    s_i = np.asarray(s_i, dtype=np.float64)
    s_j = np.asarray(s_j, dtype=np.float64)

    q0 = slerp(q_i, q_j, cfg.slerp_t)
    s0 = np.maximum((s_i + s_j) / 2 + np.asarray(cfg.evd_offsets), EPS_SCALE)

    unit = float(np.mean(np.concatenate([s_i, s_j])))
    if not (np.isfinite(unit) and unit > 0):
        raise DegenerateCovarianceError("parent scales must be positive")
    targets = (cov_i / unit**2, cov_j / unit**2)
    floor = EPS_SCALE / unit

    def objective(x):
        return w2_objective(x, targets)

    def project(x):
        x = x.copy()
        x[4:] = np.maximum(x[4:], floor)
        return x

    x0 = np.concatenate([q0, s0 / unit])
    f0 = objective(x0)[0] * unit**2
    try:
        res = minimize(objective, x0, cfg.minimizer, project=project)
    except NumericalFailure as exc:
        log.debug("covariance merge fell back to initialization: %s", exc)
        return CovarianceMerge(q0, s0, covariance_from_qs(q0, s0), f0, f0, 0, False, True)

    q = normalize_quaternion(res.x[:4])
    s = np.maximum(res.x[4:] * unit, EPS_SCALE)
    return CovarianceMerge(q, s, covariance_from_qs(q, s), res.f * unit**2, f0, res.iterations, res.converged, False)


def merge_attributes(g_i: GaussianPrimitive, g_j: GaussianPrimitive):
    """Color and opacity of the older parent, the larger gradient, the earlier keyframe."""
    if g_i.insertion_index > g_j.insertion_index:
        raise ValueError("g_i must be the earlier-inserted primitive")
    return g_i.color, g_i.opacity, max(g_i.grad_stat, g_j.grad_stat), min(g_i.keyframe_index, g_j.keyframe_index)


def merge_pair(g_i: GaussianPrimitive, g_j: GaussianPrimitive, cfg: MergeConfig, insertion_index: int = 0):
    """Fuse two primitives; returns the merged primitive and its ``CovarianceMerge`` record."""
    cov_i, cov_j = g_i.covariance, g_j.covariance
    mu = merge_mean(g_i.mean, cov_i, g_j.mean, cov_j)
    cm = merge_covariance(cov_i, cov_j, g_i.rotation, g_i.scale, g_j.rotation, g_j.scale, cfg)
    color, opacity, grad, kf = merge_attributes(g_i, g_j)
    merged = GaussianPrimitive(
        mean=mu,
        rotation=cm.rotation,
        scale=cm.scale,
        opacity=opacity,
        color=color,
        grad_stat=grad,
        insertion_index=insertion_index,
        keyframe_index=kf,
        sh_rest=g_i.sh_rest,
    )
    return merged, cm


# ---------------------------------------------------------------------------
# the pass
# ---------------------------------------------------------------------------

@dataclass
class MergeReport:
    primitives_before: int = 0
    primitives_after: int = 0
    masked: int = 0
    voxels_occupied: int = 0
    pairs_examined: int = 0
    pairs_gated_out: int = 0
    merges_performed: int = 0
    skipped_degenerate: int = 0
    optimizer_fallbacks: int = 0
    max_merged_d2: float = 0.0
    mean_fusion_residual_max: float = 0.0
    w2_residual_mean: float = 0.0
    w2_residual_max: float = 0.0
    wall_time_s: float = 0.0
    config: dict = field(default_factory=dict)
    merges: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class _VoxelResult(NamedTuple):
    merges: list
    examined: int
    gated_out: int
    skipped: int


def _merge_voxel(splats: SplatMap, members: list[int], cfg: MergeConfig) -> _VoxelResult:
    prims = [splats[pos] for pos in members]
    covs = [p.covariance for p in prims]
    cands = []
    skipped = 0
    for a in range(len(prims)):
        for b in range(a + 1, len(prims)):
            try:
                d2 = mahalanobis_sq(prims[b].mean, prims[a].mean, covs[a])
                if cfg.symmetric_gate:
                    d2 = min(d2, mahalanobis_sq(prims[a].mean, prims[b].mean, covs[b]))
            except DegenerateCovarianceError:
                skipped += 1
                continue
            cands.append((d2, prims[a].insertion_index, prims[b].insertion_index, a, b))
    examined = len(cands) + skipped
    gated_out = sum(1 for c in cands if not c[0] < cfg.chi2_threshold)

    cands.sort()
    consumed = set()
    merges = []
    for d2, idx_i, idx_j, a, b in cands:
        if not d2 < cfg.chi2_threshold:
            break
        if a in consumed or b in consumed:
            continue
        g_i, g_j = prims[a], prims[b]
        try:
            merged, cm = merge_pair(g_i, g_j, cfg)
        except DegenerateCovarianceError:
            skipped += 1
            continue
        consumed.update((a, b))
        merges.append((members[a], members[b], d2, merged, cm))
    return _VoxelResult(merges, examined, gated_out, skipped)


def merge_pass(splats: SplatMap, cfg: MergeConfig | None = None, threads: int | None = None):
    """Run one merge pass.

    Within each voxel the gated pair with the smallest squared Mahalanobis
    distance is merged first, then the next among still-unmerged members,
    until no gated pair is left. Merged primitives receive fresh insertion
    indices and are not reconsidered in the same pass. Output order is
    survivors in their original order followed by merged primitives in
    creation order (voxels visited in sorted key order).

    Returns
    -------
    (SplatMap, MergeReport)
    """
    cfg = cfg or MergeConfig()
    t0 = time.perf_counter()
    mask = stability_mask(splats, cfg)
    bins = bin_voxels(splats, mask, cfg.voxel_size)
    keys = sorted(k for k, v in bins.items() if len(v) > 1)

    n_workers = worker_count(threads)
    if n_workers > 1 and len(keys) > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(lambda k: _merge_voxel(splats, bins[k], cfg), keys))
    else:
        results = [_merge_voxel(splats, bins[k], cfg) for k in keys]

    report = MergeReport(
        primitives_before=len(splats),
        masked=int(mask.sum()),
        voxels_occupied=len(bins),
        config=cfg.to_dict(),
    )
    next_index = splats.next_insertion_index
    consumed = set()
    created = []
    for res in results:
        report.pairs_examined += res.examined
        report.pairs_gated_out += res.gated_out
        report.skipped_degenerate += res.skipped
        for pos_i, pos_j, d2, merged, cm in res.merges:
            merged = merged.replace(insertion_index=next_index)
            g_i, g_j = splats[pos_i], splats[pos_j]
            consumed.update((pos_i, pos_j))
            created.append(merged)
            report.merges.append(
                {
                    "index_i": g_i.insertion_index,
                    "index_j": g_j.insertion_index,
                    "index_k": next_index,
                    "d2": d2,
                    "mean_offset_i": float(np.linalg.norm(merged.mean - g_i.mean)),
                    "mean_offset_j": float(np.linalg.norm(merged.mean - g_j.mean)),
                    "w2_initial": cm.initial_objective,
                    "w2_final": cm.objective,
                    "iterations": cm.iterations,
                    "converged": cm.converged,
                    "fallback": cm.fallback,
                }
            )
            next_index += 1

    survivors = [p for pos, p in enumerate(splats.primitives) if pos not in consumed]
    out = SplatMap(survivors + created, next_index)

    m = report.merges
    report.merges_performed = len(m)
    report.primitives_after = len(out)
    report.optimizer_fallbacks = sum(r["fallback"] for r in m)
    if m:
        report.max_merged_d2 = max(r["d2"] for r in m)
        report.mean_fusion_residual_max = max(max(r["mean_offset_i"], r["mean_offset_j"]) for r in m)
        report.w2_residual_mean = float(np.mean([r["w2_final"] for r in m]))
        report.w2_residual_max = max(r["w2_final"] for r in m)
    report.wall_time_s = time.perf_counter() - t0
    log.info(
        "merge pass: %d -> %d primitives (%d merges, %d pairs examined)",
        report.primitives_before,
        report.primitives_after,
        report.merges_performed,
        report.pairs_examined,
    )
    return out, report
