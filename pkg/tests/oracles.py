"""Slow, independent reference implementations used only by the tests."""

import numpy as np
from scipy.optimize import minimize as sp_minimize

from splatc.core import sh_to_color
from splatc.merge import w2_sq
from splatc.render import project


def naive_render(splats, pose, intr, near=0.01, alpha_max=0.99, t_min=1e-4, support_d2=9.0):
    """Untiled front-to-back compositing, one splat at a time over every pixel."""
    H, W = intr.height, intr.width
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    T = np.ones((H, W))
    projected = []
    for k, prim in enumerate(splats):
        ps = project(prim, pose, intr, near)
        if ps is not None:
            projected.append((ps.depth, k, ps))
    projected.sort(key=lambda t: (t[0], t[1]))
    for _, _, ps in projected:
        inv = np.linalg.inv(ps.cov2d)
        dx, dy = xs - ps.mean2d[0], ys - ps.mean2d[1]
        d2 = inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy
        alpha = np.minimum(ps.opacity * np.exp(-0.5 * d2), alpha_max)
        alpha[d2 > support_d2] = 0.0
        alpha[T < t_min] = 0.0
        w = alpha * T
        color += w[..., None] * ps.color
        depth += w * ps.depth
        T = T * (1.0 - alpha)
    return np.clip(color, 0, 1), depth, T


def nelder_mead_mean(mu_i, cov_i, mu_j, cov_j):
    """Maximize the summed Gaussian log-likelihoods numerically (restarted Nelder-Mead)."""

    mu_i, mu_j = np.asarray(mu_i, dtype=float), np.asarray(mu_j, dtype=float)
    inv_i, inv_j = np.linalg.inv(cov_i), np.linalg.inv(cov_j)

    # negative log-likelihood sum up to constants
    def neg(m):
        a, b = m - mu_i, m - mu_j
        return 0.5 * (a @ inv_i @ a + b @ inv_j @ b)

    x = 0.5 * (mu_i + mu_j)
    for _ in range(4):
        res = sp_minimize(neg, x, method="Nelder-Mead", options={"xatol": 1e-11, "fatol": 1e-15, "maxiter": 20000})
        x = res.x
    return x


def grid_barycenter_diag(var_i, var_j, levels=6, n=11):
    """Coarse-to-fine grid search for the diagonal covariance minimizing the W2 sum."""
    lo = np.sqrt(np.minimum(var_i, var_j)) * 0.5
    hi = np.sqrt(np.maximum(var_i, var_j)) * 1.5
    ci, cj = np.diag(var_i), np.diag(var_j)
    best = None
    for _ in range(levels):
        axes = [np.linspace(lo[a], hi[a], n) for a in range(3)]
        best_f = np.inf
        for s0 in axes[0]:
            for s1 in axes[1]:
                for s2 in axes[2]:
                    ck = np.diag([s0 * s0, s1 * s1, s2 * s2])
                    f = w2_sq(ck, ci) + w2_sq(ck, cj)
                    if f < best_f:
                        best_f, best = f, np.array([s0, s1, s2])
        step = (hi - lo) / (n - 1)
        lo, hi = best - step, best + step
    return np.diag(best**2)


def brute_nearest_depth(u, v, keypoints):
    best_k, best_d2 = None, None
    for k, kp in enumerate(keypoints):
        if not (np.isfinite(kp.depth) and kp.depth > 0):
            continue
        d2 = (kp.u - u) ** 2 + (kp.v - v) ** 2
        if best_d2 is None or d2 < best_d2:
            best_k, best_d2 = k, d2
    return keypoints[best_k].depth


def quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def angle_axis_slerp(q_i, q_j, t):
    """q_i * (q_i^-1 q_j)^t via the relative rotation's angle-axis form, shorter arc."""
    rel = quat_mul(quat_conj(q_i), q_j)
    if rel[0] < 0:
        rel = -rel
    angle = 2 * np.arccos(np.clip(rel[0], -1, 1))
    axis = rel[1:] / np.linalg.norm(rel[1:])
    step = np.concatenate([[np.cos(t * angle / 2)], np.sin(t * angle / 2) * axis])
    return quat_mul(q_i, step)


def srgb_of(prim):
    return sh_to_color(prim.color)
