"""``splatc`` command line: synth, sample, compact, render, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import splat_io as sio
from .core import CameraPose, PinholeIntrinsics, SplatError, SplatMap
from .harness import ConfigError, compare_maps, estimate_bytes, load_config, merge_config, patch_config
from .merge import merge_pass
from .render import depth_loss, loss, psnr, rasterize
from .sampler import assign_depths, coverage_stats, initialize_primitives, partition_patches, sample_sparse_patches
from .synth import SynthSceneConfig, orbit_intrinsics, synth

log = logging.getLogger("splatc")


class CommandError(Exception):
    """Runtime failure reported to the user with exit code 1."""


def _dump_json(obj, path: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _require_file(path: Path, what: str = "input") -> Path:
    if not path.is_file():
        raise CommandError(f"{what} file not found: {path}")
    return path


def _config(args, **overrides):
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        _require_file(cfg_path, "config")
    return load_config(cfg_path, overrides)


def _intrinsics(args, width: int | None = None, height: int | None = None) -> PinholeIntrinsics | None:
    if getattr(args, "intrinsics", None) is not None:
        return sio.read_intrinsics(_require_file(args.intrinsics, "intrinsics"))
    if args.fx is not None:
        w = args.width or width
        h = args.height or height
        if w is None or h is None:
            raise CommandError("--fx needs --width/--height (or an image to take them from)")
        fy = args.fy if args.fy is not None else args.fx
        cx = args.cx if args.cx is not None else (w - 1) / 2
        cy = args.cy if args.cy is not None else (h - 1) / 2
        return PinholeIntrinsics(args.fx, fy, cx, cy, w, h)
    return None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args, seed=args.seed, voxel_size=args.voxel_size)
    jitter = args.jitter_sigma if args.jitter_sigma is not None else 0.1 * float(cfg["voxel_size"])
    scene_cfg = SynthSceneConfig(args.base, args.dup_fraction, jitter, args.extent, int(cfg["seed"]))
    splats, poses = synth(scene_cfg)
    out = args.out
    sio.write_splat_ply(splats, out)
    poses_out = args.poses_out or out.with_name(out.stem + "_poses.txt")
    intr_out = args.intrinsics_out or out.with_name(out.stem + "_intrinsics.json")
    sio.write_poses(poses, poses_out)
    sio.write_intrinsics(orbit_intrinsics(args.width, args.height, args.fov), intr_out)
    print(f"wrote {len(splats)} primitives to {out}, {len(poses)} poses to {poses_out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config(
        args,
        patch=args.patch,
        min_kp=args.min_kp,
        samples_per_patch=args.samples_per_patch,
        seed=args.seed,
        depth_scale=args.depth_scale,
    )
    pg = patch_config(cfg)
    rgb = sio.read_rgb(_require_file(args.image, "image"))
    h, w = rgb.shape[:2]
    keypoints = sio.read_keypoints_csv(_require_file(args.keypoints, "keypoints"))
    depth = None
    if args.depth is not None:
        depth = sio.read_depth_png(_require_file(args.depth, "depth"), float(cfg["depth_scale"]))
        if depth.shape != (h, w):
            raise CommandError(f"depth image {depth.shape[::-1]} does not match color image {(w, h)}")
    if (depth is None or not np.isfinite(depth).any()) and not any(kp.has_depth for kp in keypoints):
        raise CommandError("no depth available: supply --depth or keypoints with depth")
    pose = CameraPose.identity()
    if args.pose is not None:
        poses = sio.read_poses(_require_file(args.pose, "pose"))
        if not poses:
            raise CommandError(f"pose file is empty: {args.pose}")
        pose = poses[min(args.pose_index, len(poses) - 1)]
    intr = _intrinsics(args, w, h) or PinholeIntrinsics(525.0, 525.0, (w - 1) / 2, (h - 1) / 2, w, h)

    patches = partition_patches(w, h, pg)
    points = sample_sparse_patches(keypoints, patches, pg)
    cov = coverage_stats(points, patches, pg)
    points, dropped = assign_depths(points, depth, keypoints)
    prims, skipped = initialize_primitives(points, pose, intr, rgb, keyframe_index=args.keyframe)
    sio.write_splat_ply(SplatMap(prims, len(prims)), args.out)
    print(
        f"patches={cov.patches} sparse_patches={cov.sparse_patches} keypoints={cov.keypoints} "
        f"samples={cov.samples} min_points_per_patch={cov.min_points_per_patch} "
        f"dropped_no_depth={dropped + skipped} primitives={len(prims)}"
    )
    return 0


def cmd_compact(args) -> int:
    cfg = _config(
        args,
        voxel_size=args.voxel_size,
        grad_tau=args.grad_tau,
        chi2=args.chi2,
        slerp_t=args.slerp_t,
        passes=args.passes,
        kf_min=args.kf_min,
        kf_max=args.kf_max,
        symmetric_gate=True if args.symmetric_gate else None,
    )
    mcfg = merge_config(cfg)
    passes = int(cfg["passes"])
    if passes < 0:
        raise CommandError("--passes must be >= 0")
    splats = sio.read_splat_ply(_require_file(args.inp))
    before = len(splats)
    reports = []
    for _ in range(passes):
        splats, rep = merge_pass(splats, mcfg)
        reports.append(rep.to_dict())
    sio.write_splat_ply(splats, args.out)
    report_path = args.report or args.out.with_suffix(".json")
    _dump_json(
        {
            "input": str(args.inp),
            "output": str(args.out),
            "primitives_before": before,
            "primitives_after": len(splats),
            "passes": reports,
        },
        report_path,
    )
    print(f"{before} -> {len(splats)} primitives after {passes} pass(es); report at {report_path}")
    return 0


def cmd_render(args) -> int:
    cfg = _config(args, depth_scale=args.depth_scale)
    splats = sio.read_splat_ply(_require_file(args.inp))
    poses = sio.read_poses(_require_file(args.poses, "poses"))
    intr = _intrinsics(args) or orbit_intrinsics(args.width or 128, args.height or 128)
    scale = float(cfg["depth_scale"])
    if args.pose_index is not None:
        if not 0 <= args.pose_index < len(poses):
            raise CommandError(f"pose index {args.pose_index} out of range (0..{len(poses) - 1})")
        frame = rasterize(splats, poses[args.pose_index], intr)
        sio.write_rgb(frame.color, args.out)
        if args.depth_out is not None:
            sio.write_depth_png(frame.depth, args.depth_out, scale)
        return 0
    args.out.mkdir(parents=True, exist_ok=True)
    for k, pose in enumerate(poses):
        frame = rasterize(splats, pose, intr)
        sio.write_rgb(frame.color, args.out / f"color_{k:03d}.png")
        sio.write_depth_png(frame.depth, args.out / f"depth_{k:03d}.png", scale)
    print(f"rendered {len(poses)} views to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, depth_scale=args.depth_scale)
    lam = args.lam if args.lam is not None else float(cfg["lambda"])
    lam_iso = args.lam_iso if args.lam_iso is not None else float(cfg["lambda_iso"])
    inp, gt = _require_file(args.inp), _require_file(args.gt, "ground-truth")

    if inp.suffix.lower() == ".ply" and gt.suffix.lower() == ".ply":
        if args.poses is None:
            raise CommandError("map comparison needs --poses")
        poses = sio.read_poses(_require_file(args.poses, "poses"))
        intr = _intrinsics(args) or orbit_intrinsics(args.width or 128, args.height or 128)
        report = compare_maps(
            sio.read_splat_ply(gt),
            sio.read_splat_ply(inp),
            poses,
            intr,
            int(cfg["bytes_per_primitive"]),
        ).to_dict()
    else:
        a, b = sio.read_rgb(inp), sio.read_rgb(gt)
        if a.shape != b.shape:
            raise CommandError(f"image sizes differ: {a.shape} vs {b.shape}")
        splats = sio.read_splat_ply(_require_file(args.map, "map")) if args.map is not None else None
        terms = loss(a, b, splats, lam, lam_iso)
        report = {
            "psnr": psnr(a, b),
            "ssim": terms.ssim,
            "loss": {"total": terms.total, "l1": terms.l1, "ssim": terms.ssim, "iso": terms.iso},
            "lambda": lam,
            "lambda_iso": lam_iso if splats is not None else 0.0,
        }
        if args.depth is not None and args.gt_depth is not None:
            scale = float(cfg["depth_scale"])
            report["depth_l1"] = depth_loss(
                sio.read_depth_png(_require_file(args.depth, "depth"), scale),
                sio.read_depth_png(_require_file(args.gt_depth, "ground-truth depth"), scale),
            )
    _dump_json(report, args.out)
    return 0


def cmd_report(args) -> int:
    cfg = _config(args, bytes_per_primitive=args.bytes_per_primitive)
    out = {}
    if args.show_config or args.inp is None:
        out["config"] = cfg
    if args.inp is not None:
        splats = sio.read_splat_ply(_require_file(args.inp))
        out["primitives"] = len(splats)
        out["estimated_bytes"] = estimate_bytes(splats, int(cfg["bytes_per_primitive"]))
    _dump_json(out, args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_intrinsics_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--intrinsics", type=Path, help="JSON with fx, fy, cx, cy, width, height")
    p.add_argument("--fx", type=float)
    p.add_argument("--fy", type=float)
    p.add_argument("--cx", type=float)
    p.add_argument("--cy", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatc", description="Compact Gaussian splat maps by voxel merging.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="TOML file; command-line flags take precedence")

    p = sub.add_parser("synth", help="generate a synthetic scene with planted duplicates")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--base", type=int, default=500)
    p.add_argument("--dup-fraction", type=float, default=0.5)
    p.add_argument("--jitter-sigma", type=float, help="meters; default 0.1 * voxel size")
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--fov", type=float, default=60.0, help="horizontal field of view in degrees")
    p.add_argument("--poses-out", type=Path)
    p.add_argument("--intrinsics-out", type=Path)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="Patch-Grid sampling of one frame into initial primitives")
    common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--keypoints", type=Path, required=True)
    p.add_argument("--depth", type=Path)
    p.add_argument("--pose", type=Path, help="pose file (T_CW rows); default identity")
    p.add_argument("--pose-index", type=int, default=0)
    p.add_argument("--keyframe", type=int, default=0)
    _add_intrinsics_flags(p)
    p.add_argument("--patch", type=int)
    p.add_argument("--min-kp", type=int)
    p.add_argument("--samples-per-patch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--depth-scale", type=float)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("compact", help="merge similar primitives")
    common(p)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--report", type=Path, help="JSON merge report (default: --out with .json suffix)")
    p.add_argument("--voxel-size", type=float)
    p.add_argument("--grad-tau", type=float)
    p.add_argument("--chi2", type=float)
    p.add_argument("--slerp-t", type=float)
    p.add_argument("--passes", type=int)
    p.add_argument("--kf-min", type=int)
    p.add_argument("--kf-max", type=int)
    p.add_argument("--symmetric-gate", action="store_true")
    p.set_defaults(func=cmd_compact)

    p = sub.add_parser("render", help="render color and depth PNGs")
    common(p)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--poses", type=Path, required=True)
    p.add_argument("--pose-index", type=int, help="render one view to --out (a PNG path)")
    p.add_argument("--out", type=Path, required=True, help="output directory, or PNG path with --pose-index")
    p.add_argument("--depth-out", type=Path)
    p.add_argument("--depth-scale", type=float)
    _add_intrinsics_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM/loss of an image pair, or of two maps over a pose set")
    common(p)
    p.add_argument("--in", dest="inp", type=Path, required=True, help="rendered PNG, or compacted PLY")
    p.add_argument("--gt", type=Path, required=True, help="reference PNG, or original PLY")
    p.add_argument("--map", type=Path, help="splat map for the isotropic loss term")
    p.add_argument("--depth", type=Path, help="rendered 16-bit depth PNG")
    p.add_argument("--gt-depth", type=Path)
    p.add_argument("--poses", type=Path)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lambda-iso", dest="lam_iso", type=float)
    p.add_argument("--depth-scale", type=float)
    p.add_argument("--out", type=Path, help="JSON output (default stdout)")
    _add_intrinsics_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="show resolved configuration and map statistics")
    common(p)
    p.add_argument("--show-config", action="store_true")
    p.add_argument("--in", dest="inp", type=Path)
    p.add_argument("--bytes-per-primitive", type=int)
    p.add_argument("--out", type=Path, help="JSON output (default stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, SplatError, ConfigError, OSError, ValueError) as exc:
        print(f"splatc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
