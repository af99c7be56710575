"""Patch-Grid densification: fill keypoint-poor image patches with stratified samples,
give every point a depth, and back-project the batch into initial primitives."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import EPS_SCALE, CameraPose, GaussianPrimitive, PinholeIntrinsics, color_to_sh
from .splat_io import KeypointRecord

MAX_INIT_SCALE = 0.5
INIT_OPACITY = 0.5


@dataclass(frozen=True)
class PatchGridConfig:
    patch_size: int = 32
    min_keypoints_per_patch: int = 2
    samples_per_patch: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.patch_size < 4:
            raise ValueError("patch_size must be >= 4")
        if self.samples_per_patch < 1:
            raise ValueError("samples_per_patch must be >= 1")
        if self.min_keypoints_per_patch < 0:
            raise ValueError("min_keypoints_per_patch must be >= 0")


class Source(enum.Enum):
    KEYPOINT = "keypoint"
    PG_SAMPLE = "pg_sample"


class SampledPoint(NamedTuple):
    u: float
    v: float
    depth: float
    source: Source


class Patch(NamedTuple):
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive

    def contains(self, u: float, v: float) -> bool:
        return self.x0 <= u < self.x1 and self.y0 <= v < self.y1


def partition_patches(width: int, height: int, cfg: PatchGridConfig) -> list[Patch]:
    """Row-major tiling of the image; right and bottom patches may be narrower."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    p = cfg.patch_size
    return [
        Patch(x, y, min(x + p, width), min(y + p, height))
        for y in range(0, height, p)
        for x in range(0, width, p)
    ]


def _stratified(patch: Patch, n: int, rng: np.random.Generator) -> np.ndarray:
    g = math.ceil(math.sqrt(n))
    cells = rng.permutation(g * g)[:n] if g * g > n else np.arange(n)
    cy, cx = np.divmod(cells, g)
    w, h = patch.x1 - patch.x0, patch.y1 - patch.y0
    jitter = rng.random((n, 2))
    u = patch.x0 + (cx + jitter[:, 0]) * (w / g)
    v = patch.y0 + (cy + jitter[:, 1]) * (h / g)
    # keep samples strictly inside the half-open patch
    u = np.minimum(u, np.nextafter(float(patch.x1), -np.inf))
    v = np.minimum(v, np.nextafter(float(patch.y1), -np.inf))
    return np.stack([u, v], axis=1)


def sample_sparse_patches(
    keypoints: Sequence[KeypointRecord], patches: Sequence[Patch], cfg: PatchGridConfig
) -> list[SampledPoint]:
    """Keypoints first (unchanged), then stratified samples for each sparse patch in row-major order.

    Each patch draws from its own generator seeded by ``(rng_seed, patch number)``.
    """
    out = [SampledPoint(kp.u, kp.v, kp.depth, Source.KEYPOINT) for kp in keypoints]
    if not patches:
        return out
    kp_uv = np.array([[kp.u, kp.v] for kp in keypoints]).reshape(-1, 2)
    for k, patch in enumerate(patches):
        inside = (
            (kp_uv[:, 0] >= patch.x0) & (kp_uv[:, 0] < patch.x1) & (kp_uv[:, 1] >= patch.y0) & (kp_uv[:, 1] < patch.y1)
        )
        if int(inside.sum()) >= cfg.min_keypoints_per_patch:
            continue
        rng = np.random.default_rng([cfg.rng_seed, k])
        for u, v in _stratified(patch, cfg.samples_per_patch, rng):
            out.append(SampledPoint(float(u), float(v), math.nan, Source.PG_SAMPLE))
    return out


def _pixel(u: float, v: float, width: int, height: int) -> tuple[int, int]:
    col = min(max(int(math.floor(u + 0.5)), 0), width - 1)
    row = min(max(int(math.floor(v + 0.5)), 0), height - 1)
    return row, col


def nearest_keypoint_depth(u: float, v: float, keypoints: Sequence[KeypointRecord]) -> float:
    """Depth of the closest depth-bearing keypoint in pixel space (lowest index wins ties); NaN if none."""
    best, best_d2 = math.nan, math.inf
    for kp in keypoints:
        if not kp.has_depth:
            continue
        d2 = (kp.u - u) ** 2 + (kp.v - v) ** 2
        if d2 < best_d2:
            best, best_d2 = kp.depth, d2
    return best


def assign_depth(
    point: SampledPoint, depth_image: np.ndarray | None, keypoints: Sequence[KeypointRecord]
) -> SampledPoint | None:
    """Fill in a point's depth, or return None when no source exists.

    A finite positive depth on the point itself is kept. Otherwise the depth
    image at the rounded pixel is used when valid, falling back to the
    nearest keypoint that has depth.
    """
    if math.isfinite(point.depth) and point.depth > 0:
        return point
    if depth_image is not None:
        h, w = depth_image.shape
        d = float(depth_image[_pixel(point.u, point.v, w, h)])
        if math.isfinite(d) and d > 0:
            return point._replace(depth=d)
    d = nearest_keypoint_depth(point.u, point.v, keypoints)
    if math.isnan(d):
        return None
    return point._replace(depth=d)


def assign_depths(
    points: Sequence[SampledPoint], depth_image: np.ndarray | None, keypoints: Sequence[KeypointRecord]
) -> tuple[list[SampledPoint], int]:
    """Batch form of :func:`assign_depth`; returns the kept points and the number dropped.

    The nearest-keypoint fallback is vectorized over the batch.
    """
    with_depth = [kp for kp in keypoints if kp.has_depth]
    kp_uv = np.array([[kp.u, kp.v] for kp in with_depth]).reshape(-1, 2)
    kp_depth = np.array([kp.depth for kp in with_depth])
    out: list[SampledPoint] = []
    pending = []
    for p in points:
        if math.isfinite(p.depth) and p.depth > 0:
            out.append(p)
            continue
        if depth_image is not None:
            h, w = depth_image.shape
            d = float(depth_image[_pixel(p.u, p.v, w, h)])
            if math.isfinite(d) and d > 0:
                out.append(p._replace(depth=d))
                continue
        pending.append(len(out))
        out.append(p)
    if pending and kp_uv.shape[0]:
        uv = np.array([[out[k].u, out[k].v] for k in pending])
        for start in range(0, len(pending), 4096):
            chunk = uv[start : start + 4096]
            d2 = ((chunk[:, None, :] - kp_uv[None, :, :]) ** 2).sum(axis=2)
            nearest = np.argmin(d2, axis=1)  # first minimum = lowest keypoint index
            for k, j in zip(pending[start : start + 4096], nearest):
                out[k] = out[k]._replace(depth=float(kp_depth[j]))
    keep = [p for p in out if math.isfinite(p.depth) and p.depth > 0]
    return keep, len(out) - len(keep)


def initial_scales(points_world: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the ``k`` nearest neighbours, clamped to ``[EPS_SCALE, 0.5]``."""
    n = len(points_world)
    if n <= 1:
        return np.full(n, MAX_INIT_SCALE)
    kk = min(k, n - 1)
    dist, _ = cKDTree(points_world).query(points_world, k=kk + 1)
    return np.clip(dist[:, 1:].mean(axis=1), EPS_SCALE, MAX_INIT_SCALE)


def initialize_primitives(
    points: Sequence[SampledPoint],
    pose: CameraPose,
    intr: PinholeIntrinsics,
    rgb: np.ndarray | None = None,
    first_index: int = 0,
    keyframe_index: int = 0,
) -> tuple[list[GaussianPrimitive], int]:
    """Back-project depth-bearing points into isotropic, identity-rotation primitives.

    Returns the primitives and the number of points skipped for non-positive
    or missing depth.
    """
    good = [p for p in points if math.isfinite(p.depth) and p.depth > 0]
    skipped = len(points) - len(good)
    if not good:
        return [], skipped
    u = np.array([p.u for p in good])
    v = np.array([p.v for p in good])
    d = np.array([p.depth for p in good])
    world = pose.to_world(intr.backproject(u, v, d))
    scales = initial_scales(world)
    if rgb is not None:
        h, w = rgb.shape[:2]
        colors = np.stack([rgb[_pixel(a, b, w, h)][:3] for a, b in zip(u, v)])
    else:
        colors = np.full((len(good), 3), 0.5)
    prims = [
        GaussianPrimitive(
            mean=world[k],
            rotation=(1.0, 0.0, 0.0, 0.0),
            scale=(scales[k],) * 3,
            opacity=INIT_OPACITY,
            color=color_to_sh(colors[k]),
            grad_stat=0.0,
            insertion_index=first_index + k,
            keyframe_index=keyframe_index,
        )
        for k in range(len(good))
    ]
    return prims, skipped


class PatchCoverage(NamedTuple):
    patches: int
    sparse_patches: int
    keypoints: int
    samples: int
    min_points_per_patch: int


def coverage_stats(points: Sequence[SampledPoint], patches: Sequence[Patch], cfg: PatchGridConfig) -> PatchCoverage:
    uv = np.array([[p.u, p.v] for p in points]).reshape(-1, 2)
    kp = np.array([p.source is Source.KEYPOINT for p in points], dtype=bool)
    counts, kp_counts = [], []
    for patch in patches:
        inside = (uv[:, 0] >= patch.x0) & (uv[:, 0] < patch.x1) & (uv[:, 1] >= patch.y0) & (uv[:, 1] < patch.y1)
        counts.append(int(inside.sum()))
        kp_counts.append(int((inside & kp).sum()))
    sparse = sum(c < cfg.min_keypoints_per_patch for c in kp_counts)
    return PatchCoverage(len(patches), sparse, int(kp.sum()), int((~kp).sum()), min(counts, default=0))
