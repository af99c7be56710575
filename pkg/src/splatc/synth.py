"""Synthetic splat scenes with planted near-duplicates, plus an orbit of cameras around them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraPose, GaussianPrimitive, PinholeIntrinsics, SplatMap, color_to_sh
from .merge import GRAD_TAU

ORBIT_POSES = 12


@dataclass(frozen=True)
class SynthSceneConfig:
    base_count: int = 500
    dup_fraction: float = 0.5
    jitter_sigma: float = 0.005
    extent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.base_count < 1:
            raise ValueError("base_count must be >= 1")
        if not 0.0 <= self.dup_fraction <= 1.0:
            raise ValueError("dup_fraction must lie in [0, 1]")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if not self.extent > 0:
            raise ValueError("extent must be positive")


def _random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def orbit_poses(radius: float, n: int = ORBIT_POSES) -> list[CameraPose]:
    """``n`` cameras evenly spaced on a horizontal circle, all looking at the origin."""
    angles = 2 * np.pi * np.arange(n) / n
    return [CameraPose.look_at((radius * np.cos(a), radius * np.sin(a), 0.0)) for a in angles]


def orbit_intrinsics(width: int = 128, height: int = 128, fov_deg: float = 60.0) -> PinholeIntrinsics:
    return PinholeIntrinsics.from_fov(width, height, fov_deg)


def synth(cfg: SynthSceneConfig) -> tuple[SplatMap, list[CameraPose]]:
    """Random scene in the cube ``[-extent, extent]^3``.

    The first ``base_count`` primitives are independent; the next
    ``floor(dup_fraction * base_count)`` copy randomly chosen base primitives
    with the mean jittered by ``N(0, jitter_sigma^2)`` per axis, every other
    attribute identical. Cameras orbit at radius ``2 * extent``.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.base_count
    means = rng.uniform(-cfg.extent, cfg.extent, size=(n, 3))
    quats = _random_quaternions(rng, n)
    scales = np.exp(rng.uniform(np.log(0.005), np.log(0.05), size=(n, 3)))
    colors = color_to_sh(rng.uniform(0.0, 1.0, size=(n, 3)))
    opacities = rng.uniform(0.5, 0.99, size=n)
    grads = rng.uniform(0.0, 2 * GRAD_TAU, size=n)

    prims = [
        GaussianPrimitive(means[k], quats[k], scales[k], opacities[k], colors[k], grads[k], insertion_index=k)
        for k in range(n)
    ]
    n_dup = int(np.floor(cfg.dup_fraction * n))
    sources = np.sort(rng.choice(n, size=n_dup, replace=False)) if n_dup else np.zeros(0, dtype=int)
    jitter = rng.normal(0.0, cfg.jitter_sigma, size=(n_dup, 3))
    for k, (src, dx) in enumerate(zip(sources, jitter)):
        prims.append(prims[src].replace(mean=prims[src].mean + dx, insertion_index=n + k))
    return SplatMap(prims, n + n_dup), orbit_poses(2 * cfg.extent)
