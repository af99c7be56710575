"""Layered configuration, memory estimates, and map-vs-map evaluation reports."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import CameraPose, PinholeIntrinsics, SplatMap
from .merge import CHI2_3DOF_95, EVD_OFFSETS, GRAD_TAU, KF_MAX_DEFAULT, SLERP_T, MergeConfig
from .optim import MinimizerConfig
from .render import psnr, rasterize, ssim
from .sampler import PatchGridConfig
from .splat_io import DEFAULT_DEPTH_SCALE

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# 59 float32 attributes: position, normal, 48 SH coefficients, opacity, scale, rotation
BYTES_PER_PRIMITIVE = 236

DEFAULTS: dict[str, Any] = {
    "voxel_size": 0.05,
    "grad_tau": GRAD_TAU,
    "chi2": CHI2_3DOF_95,
    "slerp_t": SLERP_T,
    "evd_offsets": list(EVD_OFFSETS),
    "kf_min": 0,
    "kf_max": KF_MAX_DEFAULT,
    "symmetric_gate": False,
    "passes": 1,
    "memory_pairs": 8,
    "grad_tolerance": 1e-8,
    "max_iterations": 100,
    "patch": 32,
    "min_kp": 2,
    "samples_per_patch": 4,
    "seed": 0,
    "depth_scale": DEFAULT_DEPTH_SCALE,
    "lambda": 0.2,
    "lambda_iso": 10.0,
    "bytes_per_primitive": BYTES_PER_PRIMITIVE,
}


class ConfigError(ValueError):
    pass


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Built-in defaults, then the TOML file, then explicit overrides (``None`` values ignored)."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg.update(data)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


def merge_config(cfg: dict[str, Any]) -> MergeConfig:
    return MergeConfig(
        voxel_size=float(cfg["voxel_size"]),
        grad_tau=float(cfg["grad_tau"]),
        chi2_threshold=float(cfg["chi2"]),
        slerp_t=float(cfg["slerp_t"]),
        evd_offsets=tuple(cfg["evd_offsets"]),
        kf_window=(int(cfg["kf_min"]), int(cfg["kf_max"])),
        symmetric_gate=bool(cfg["symmetric_gate"]),
        minimizer=MinimizerConfig(
            memory_pairs=int(cfg["memory_pairs"]),
            grad_tolerance=float(cfg["grad_tolerance"]),
            max_iterations=int(cfg["max_iterations"]),
        ),
    )


def patch_config(cfg: dict[str, Any]) -> PatchGridConfig:
    return PatchGridConfig(int(cfg["patch"]), int(cfg["min_kp"]), int(cfg["samples_per_patch"]), int(cfg["seed"]))


def estimate_bytes(splats: SplatMap, per_primitive_bytes: int = BYTES_PER_PRIMITIVE) -> int:
    if per_primitive_bytes <= 0:
        raise ValueError("per_primitive_bytes must be positive")
    return len(splats) * per_primitive_bytes


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    primitives_before: int
    primitives_after: int
    bytes_before: int
    bytes_after: int
    per_view_psnr: list[float] = field(default_factory=list)
    merge_pass_times_s: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compare_maps(
    before: SplatMap,
    after: SplatMap,
    poses: Sequence[CameraPose],
    intr: PinholeIntrinsics,
    per_primitive_bytes: int = BYTES_PER_PRIMITIVE,
    merge_times: Sequence[float] = (),
) -> EvalReport:
    """Render both maps from every pose and average PSNR/SSIM of after-vs-before."""
    ps, ss = [], []
    for pose in poses:
        a = rasterize(before, pose, intr).color
        b = rasterize(after, pose, intr).color
        ps.append(psnr(b, a))
        ss.append(ssim(b, a))
    return EvalReport(
        psnr=float(np.mean(ps)) if ps else float("nan"),
        ssim=float(np.mean(ss)) if ss else float("nan"),
        primitives_before=len(before),
        primitives_after=len(after),
        bytes_before=estimate_bytes(before, per_primitive_bytes),
        bytes_after=estimate_bytes(after, per_primitive_bytes),
        per_view_psnr=[float(p) for p in ps],
        merge_pass_times_s=[float(t) for t in merge_times],
    )
