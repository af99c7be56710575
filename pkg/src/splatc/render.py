"""CPU forward splatting: projection, tile-binned alpha compositing, losses and image metrics."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import correlate1d

from ._parallel import worker_count
from .core import CameraPose, GaussianPrimitive, PinholeIntrinsics, SplatMap, quat_to_rotmat_batch, sh_to_color

TILE = 16
DILATION = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
# splat support: squared Mahalanobis radius of the 3-sigma ellipse
SUPPORT_D2 = 9.0
NEAR = 0.01


class ProjectedSplat(NamedTuple):
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class RenderedFrame:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    transmittance: np.ndarray  # (H, W)


def _pinhole_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    J = np.zeros(p_cam.shape[:-1] + (2, 3))
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def project(prim: GaussianPrimitive, pose: CameraPose, intr: PinholeIntrinsics, near: float = NEAR):
    """Project one primitive to the image; returns None when it lies at or behind ``near``."""
    p_cam = pose.to_camera(prim.mean)
    if p_cam[2] <= near:
        return None
    J = _pinhole_jacobian(p_cam, intr.fx, intr.fy)
    W = pose.rotation
    cov2d = J @ W @ prim.covariance @ W.T @ J.T + DILATION * np.eye(2)
    return ProjectedSplat(intr.project(p_cam), cov2d, float(p_cam[2]), prim.opacity, sh_to_color(prim.color))


class _Projected(NamedTuple):
    mean2d: np.ndarray  # (N, 2)
    conic: np.ndarray  # (N, 3): inverse covariance entries a, b, c
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    bbox: np.ndarray  # (N, 4) x0, y0, x1, y1 in pixels, inclusive


def project_all(splats: SplatMap, pose: CameraPose, intr: PinholeIntrinsics, near: float = NEAR) -> _Projected:
    """Vectorized projection of a whole map, sorted front to back, culled splats removed."""
    a = splats.arrays()
    p_cam = pose.to_camera(a.means) if len(splats) else np.zeros((0, 3))
    keep = p_cam[:, 2] > near
    p_cam = p_cam[keep]
    R = quat_to_rotmat_batch(a.rotations[keep]) if keep.any() else np.zeros((0, 3, 3))
    M = R * a.scales[keep][:, None, :]
    cov3 = M @ np.swapaxes(M, 1, 2)
    JW = _pinhole_jacobian(p_cam, intr.fx, intr.fy) @ pose.rotation
    cov2 = JW @ cov3 @ np.swapaxes(JW, 1, 2) + DILATION * np.eye(2)
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 1, 0]
    ok = det > 0
    z = p_cam[:, 2]
    mean2d = np.stack([intr.fx * p_cam[:, 0] / z + intr.cx, intr.fy * p_cam[:, 1] / z + intr.cy], axis=1)
    conic = np.stack([cov2[:, 1, 1], -cov2[:, 0, 1], cov2[:, 0, 0]], axis=1) / np.where(ok, det, 1.0)[:, None]
    rx = 3.0 * np.sqrt(np.maximum(cov2[:, 0, 0], 0))
    ry = 3.0 * np.sqrt(np.maximum(cov2[:, 1, 1], 0))
    bbox = np.stack(
        [np.ceil(mean2d[:, 0] - rx), np.ceil(mean2d[:, 1] - ry), np.floor(mean2d[:, 0] + rx), np.floor(mean2d[:, 1] + ry)],
        axis=1,
    )
    order = np.argsort(z[ok], kind="stable")
    sel = np.flatnonzero(ok)[order]
    return _Projected(
        mean2d[sel],
        conic[sel],
        z[sel],
        a.opacities[keep][sel],
        sh_to_color(a.colors[keep][sel]),
        bbox[sel],
    )


def splat_alpha(px: np.ndarray, py: np.ndarray, mean2d, conic, opacity) -> np.ndarray:
    """Alpha of each splat (columns) at each pixel (rows), zero outside the 3-sigma ellipse."""
    dx = px[:, None] - mean2d[None, :, 0]
    dy = py[:, None] - mean2d[None, :, 1]
    d2 = conic[None, :, 0] * dx * dx + 2 * conic[None, :, 1] * dx * dy + conic[None, :, 2] * dy * dy
    alpha = np.clip(opacity[None, :] * np.exp(-0.5 * d2), 0.0, ALPHA_MAX)
    alpha[d2 > SUPPORT_D2] = 0.0
    return alpha


def _render_tile(proj: _Projected, ids: np.ndarray, x0: int, y0: int, x1: int, y1: int):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px, py = xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)
    n = px.size
    if ids.size == 0:
        return np.zeros((n, 3)), np.zeros(n), np.ones(n)
    alpha = splat_alpha(px, py, proj.mean2d[ids], proj.conic[ids], proj.opacity[ids])
    survive = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.empty_like(survive)
    t_before[:, 0] = 1.0
    t_before[:, 1:] = survive[:, :-1]
    # early termination: a splat is skipped once transmittance has fallen below T_MIN
    alpha = np.where(t_before >= T_MIN, alpha, 0.0)
    weights = alpha * t_before
    color = weights @ proj.color[ids]
    depth = weights @ proj.depth[ids]
    trans = np.prod(1.0 - alpha, axis=1)
    return color, depth, trans


def rasterize(
    splats: SplatMap,
    pose: CameraPose,
    intr: PinholeIntrinsics,
    near: float = NEAR,
    threads: int | None = None,
) -> RenderedFrame:
    """Render color, depth and final transmittance with 16x16 tile binning.

    Splats are binned by the bounding box of their 3-sigma ellipse and
    composited front to back in global camera-depth order. Background is
    black with depth 0.
    """
    W, H = intr.width, intr.height
    proj = project_all(splats, pose, intr, near)
    nx, ny = math.ceil(W / TILE), math.ceil(H / TILE)

    tiles_of: list[list[int]] = [[] for _ in range(nx * ny)]
    tx0 = np.clip(np.floor(proj.bbox[:, 0] / TILE), 0, nx - 1).astype(int)
    ty0 = np.clip(np.floor(proj.bbox[:, 1] / TILE), 0, ny - 1).astype(int)
    tx1 = np.clip(np.floor(proj.bbox[:, 2] / TILE), 0, nx - 1).astype(int)
    ty1 = np.clip(np.floor(proj.bbox[:, 3] / TILE), 0, ny - 1).astype(int)
    visible = (proj.bbox[:, 2] >= 0) & (proj.bbox[:, 3] >= 0) & (proj.bbox[:, 0] <= W - 1) & (proj.bbox[:, 1] <= H - 1)
    visible &= (proj.bbox[:, 0] <= proj.bbox[:, 2]) & (proj.bbox[:, 1] <= proj.bbox[:, 3])
    # splat ids are appended in depth order, so every tile list stays sorted
    for k in np.flatnonzero(visible):
        for ty in range(ty0[k], ty1[k] + 1):
            for tx in range(tx0[k], tx1[k] + 1):
                tiles_of[ty * nx + tx].append(k)

    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    trans = np.ones((H, W))

    def work(t):
        ty, tx = divmod(t, nx)
        x0, y0 = tx * TILE, ty * TILE
        x1, y1 = min(x0 + TILE, W), min(y0 + TILE, H)
        c, d, tr = _render_tile(proj, np.asarray(tiles_of[t], dtype=int), x0, y0, x1, y1)
        shape = (y1 - y0, x1 - x0)
        color[y0:y1, x0:x1] = c.reshape(shape + (3,))
        depth[y0:y1, x0:x1] = d.reshape(shape)
        trans[y0:y1, x0:x1] = tr.reshape(shape)

    n_workers = worker_count(threads)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            list(pool.map(work, range(nx * ny)))
    else:
        for t in range(nx * ny):
            work(t)
    return RenderedFrame(np.clip(color, 0.0, 1.0), depth, np.clip(trans, 0.0, 1.0))


# ---------------------------------------------------------------------------
# metrics and losses
# ---------------------------------------------------------------------------

def _check_same(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return 20.0 * math.log10(1.0 / math.sqrt(mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < 11:
        raise ValueError("SSIM needs images at least 11 pixels on each side")
    win = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def blur(x):
        x = correlate1d(x, win, axis=0, mode="constant")
        x = correlate1d(x, win, axis=1, mode="constant")
        return x[5:-5, 5:-5]

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(np.mean(num / den, axis=(0, 1))))


def isotropic_term(splats: SplatMap) -> float:
    """Mean over primitives of the mean absolute deviation of the scale from its own mean."""
    if len(splats) == 0:
        return 0.0
    s = splats.arrays().scales
    return float(np.mean(np.abs(s - s.mean(axis=1, keepdims=True))))


class LossTerms(NamedTuple):
    total: float
    l1: float
    ssim: float
    iso: float


def loss(rendered, gt, splats: SplatMap | None = None, lam: float = 0.2, lam_iso: float = 10.0) -> LossTerms:
    """Photometric + structural + isotropic objective, evaluated forward only."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_same(rendered, gt)
    l1 = float(np.mean(np.abs(rendered - gt)))
    s = ssim(rendered, gt)
    iso = isotropic_term(splats) if splats is not None else 0.0
    total = (1 - lam) * l1 + lam * (1 - s) + lam_iso * iso
    return LossTerms(total, l1, s, iso)


def depth_loss(rendered_depth, gt_depth, transmittance=None) -> float:
    """Mean L1 over pixels with finite ground truth that the render substantially covers."""
    rd = np.asarray(rendered_depth, dtype=np.float64)
    gd = np.asarray(gt_depth, dtype=np.float64)
    _check_same(rd, gd)
    valid = np.isfinite(gd) & np.isfinite(rd)
    if transmittance is not None:
        tr = np.asarray(transmittance, dtype=np.float64)
        _check_same(rd, tr)
        valid &= tr < 0.5
    if not valid.any():
        warnings.warn("depth loss has no valid pixels", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.mean(np.abs(rd[valid] - gd[valid])))
