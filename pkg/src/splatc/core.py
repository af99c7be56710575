"""Gaussian primitives, splat maps, cameras, and the covariance <-> (rotation, scale) bridge.

Quaternions are stored scalar-first ``(w, x, y, z)``, matching the ``rot_0..3``
layout of splat PLY files. Scales are linear (not log) and strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

EPS_PD = 1e-12
EPS_SCALE = 1e-7
SH_C0 = 0.28209479177387814


class SplatError(Exception):
    """Base class for errors raised by this package."""


class DegenerateCovarianceError(SplatError, ValueError):
    pass


def _frozen(a, shape: tuple[int, ...] | None = None, name: str = "value") -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# quaternions and rotation matrices
# ---------------------------------------------------------------------------

def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ValueError("quaternion must be 4 finite numbers")
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion has no rotation")
    return q / n


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a quaternion ``(w, x, y, z)``; the input is normalized first."""
    w, x, y, z = normalize_quaternion(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_to_rotmat_batch(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R) -> np.ndarray:
    """Unit quaternion of a proper rotation matrix (Shepperd's method), with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        S = np.sqrt(tr + 1.0) * 2
        q = [0.25 * S, (R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / S, 0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S]
    elif R[1, 1] > R[2, 2]:
        S = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / S, (R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S]
    else:
        S = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / S, (R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


# ---------------------------------------------------------------------------
# covariance bridge
# ---------------------------------------------------------------------------

def as_covariance(m) -> np.ndarray:
    """Symmetrize ``m`` and clamp its spectrum to at least ``EPS_PD``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"covariance must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("covariance must be finite")
    m = 0.5 * (m + m.T)
    lam, V = np.linalg.eigh(m)
    if lam[0] < EPS_PD:
        m = (V * np.maximum(lam, EPS_PD)) @ V.T
        m = 0.5 * (m + m.T)
    return m


def covariance_from_qs(rotation, scale) -> np.ndarray:
    """Build ``R S S^T R^T`` from a quaternion and a positive scale triple."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3,) or not np.all(np.isfinite(scale)):
        raise ValueError("scale must be 3 finite numbers")
    if np.any(scale <= 0):
        raise ValueError("scale must be strictly positive")
    M = quat_to_rotmat(rotation) * scale
    return as_covariance(M @ M.T)


def qs_from_covariance(cov) -> tuple[np.ndarray, np.ndarray]:
    """Decompose a covariance into ``(quaternion, scale)``.

    Eigenvalues are sorted descending; if the eigenvector matrix is a
    reflection, its first column is negated so the result is a rotation.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (3, 3) or not np.all(np.isfinite(cov)):
        raise ValueError("covariance must be a finite 3x3 matrix")
    lam, V = np.linalg.eigh(0.5 * (cov + cov.T))
    lam, V = lam[::-1], V[:, ::-1].copy()
    if lam[-1] < -1e-9 * max(abs(lam[0]), 1.0):
        raise DegenerateCovarianceError(f"covariance is not positive definite (eigenvalues {lam})")
    if np.linalg.det(V) < 0:
        V[:, 0] = -V[:, 0]
    s = np.maximum(np.sqrt(np.maximum(lam, 0.0)), EPS_SCALE)
    return rotmat_to_quat(V), s


def sh_to_color(coeffs) -> np.ndarray:
    return np.clip(0.5 + SH_C0 * np.asarray(coeffs, dtype=np.float64), 0.0, 1.0)


def color_to_sh(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    grad_stat: float = 0.0
    insertion_index: int = 0
    keyframe_index: int = 0
    # higher SH bands, carried opaquely through I/O and merging
    sh_rest: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "mean", _frozen(self.mean, (3,), "mean"))
        q = normalize_quaternion(self.rotation)
        q.setflags(write=False)
        set_(self, "rotation", q)
        s = np.array(self.scale, dtype=np.float64)
        if s.shape != (3,) or not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise ValueError(f"scale must be 3 finite positive numbers, got {self.scale!r}")
        set_(self, "scale", _frozen(np.maximum(s, EPS_SCALE), (3,), "scale"))
        o = float(self.opacity)
        if not 0.0 <= o <= 1.0:
            raise ValueError(f"opacity must lie in [0, 1], got {o}")
        set_(self, "opacity", o)
        set_(self, "color", _frozen(self.color, (3,), "color"))
        g = float(self.grad_stat)
        if not (np.isfinite(g) and g >= 0):
            raise ValueError(f"grad_stat must be finite and non-negative, got {g}")
        set_(self, "grad_stat", g)
        if int(self.insertion_index) < 0 or int(self.keyframe_index) < 0:
            raise ValueError("bookkeeping indices must be non-negative")
        set_(self, "insertion_index", int(self.insertion_index))
        set_(self, "keyframe_index", int(self.keyframe_index))
        set_(self, "sh_rest", _frozen(np.ravel(self.sh_rest), None, "sh_rest"))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_qs(self.rotation, self.scale)

    @property
    def rgb(self) -> np.ndarray:
        return sh_to_color(self.color)

    def replace(self, **changes) -> "GaussianPrimitive":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return GaussianPrimitive(**values)


class SplatArrays(NamedTuple):
    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    grad_stats: np.ndarray
    insertion_indices: np.ndarray
    keyframe_indices: np.ndarray


@dataclass
class SplatMap:
    primitives: list[GaussianPrimitive] = field(default_factory=list)
    next_insertion_index: int = 0

    def __post_init__(self):
        seen = set()
        for p in self.primitives:
            if p.insertion_index in seen:
                raise ValueError(f"duplicate insertion index {p.insertion_index}")
            seen.add(p.insertion_index)
        lowest_free = max(seen) + 1 if seen else 0
        if self.next_insertion_index < lowest_free:
            self.next_insertion_index = lowest_free

    @classmethod
    def from_primitives(cls, prims: Iterable[GaussianPrimitive], renumber: bool = False) -> "SplatMap":
        prims = list(prims)
        if renumber:
            prims = [p.replace(insertion_index=k) for k, p in enumerate(prims)]
        return cls(prims)

    def __len__(self) -> int:
        return len(self.primitives)

    def __iter__(self):
        return iter(self.primitives)

    def __getitem__(self, k) -> GaussianPrimitive:
        return self.primitives[k]

    def arrays(self) -> SplatArrays:
        n = len(self.primitives)
        if n == 0:
            z3 = np.zeros((0, 3))
            zi = np.zeros(0, dtype=np.int64)
            return SplatArrays(z3, np.zeros((0, 4)), z3, np.zeros(0), z3, np.zeros(0), zi, zi)
        ps = self.primitives
        return SplatArrays(
            np.stack([p.mean for p in ps]),
            np.stack([p.rotation for p in ps]),
            np.stack([p.scale for p in ps]),
            np.array([p.opacity for p in ps]),
            np.stack([p.color for p in ps]),
            np.array([p.grad_stat for p in ps]),
            np.array([p.insertion_index for p in ps], dtype=np.int64),
            np.array([p.keyframe_index for p in ps], dtype=np.int64),
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera transform ``x_c = R x_w + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3), "rotation")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,), "translation"))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T, orthonormalize: bool = True) -> "CameraPose":
        """From a 4x4 (or 3x4) matrix; optionally snap the rotation block to SO(3)."""
        T = np.asarray(T, dtype=np.float64)
        R = T[:3, :3]
        if orthonormalize:
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
            if np.linalg.det(R) < 0:
                U[:, -1] = -U[:, -1]
                R = U @ Vt
        return cls(R, T[:3, 3])

    @classmethod
    def look_at(cls, center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``center`` looking at ``target`` (x right, y down, z forward)."""
        c = np.asarray(center, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - c
        if np.linalg.norm(f) == 0:
            raise ValueError("center and target coincide")
        f /= np.linalg.norm(f)
        right = np.cross(f, up)
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("viewing direction is parallel to up")
        right /= np.linalg.norm(right)
        down = np.cross(f, right)
        R = np.stack([right, down, f])
        return cls(R, -R @ c)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_world(self, points) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float = 60.0) -> "PinholeIntrinsics":
        f = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def project(self, p_cam) -> np.ndarray:
        p = np.asarray(p_cam, dtype=np.float64)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)

    def backproject(self, u, v, depth) -> np.ndarray:
        u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
        return np.stack([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth], axis=-1)


def stack_poses(poses: Sequence[CameraPose]) -> np.ndarray:
    return np.stack([p.matrix() for p in poses]) if poses else np.zeros((0, 4, 4))
