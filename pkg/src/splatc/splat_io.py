"""Reading and writing splat PLY files, keypoint CSVs, poses, and images."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import EPS_SCALE, CameraPose, GaussianPrimitive, PinholeIntrinsics, SplatError, SplatMap

MANDATORY = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)  # fmt: skip

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}  # fmt: skip

DEFAULT_DEPTH_SCALE = 5000.0


class FormatError(SplatError, ValueError):
    pass


class PayloadError(SplatError, OSError):
    pass


@dataclass(frozen=True)
class PlyHeaderInfo:
    count: int
    properties: list[tuple[str, str]]
    format: str
    comments: list[str]
    header_bytes: int


@dataclass(frozen=True)
class KeypointRecord:
    u: float
    v: float
    depth: float = math.nan
    active: bool = False

    @property
    def has_depth(self) -> bool:
        return math.isfinite(self.depth) and self.depth > 0


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def read_ply_header(fh) -> PlyHeaderInfo:
    if fh.readline().strip() != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    comments = []
    in_vertex = False
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError("PLY header ended without end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if line == "end_header":
            break
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment":
            comments.append(line[len("comment"):].strip())
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count is not None and int(parts[2]) > 0:
                raise FormatError(f"unsupported extra element '{parts[1]}'")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError(f"list property '{parts[-1]}' is not supported in the vertex element")
            props.append((parts[2], parts[1]))
    if fmt != "binary_little_endian":
        raise FormatError(f"only binary_little_endian PLY is supported, got {fmt!r}")
    if count is None:
        raise FormatError("PLY has no vertex element")
    return PlyHeaderInfo(count, props, fmt, comments, fh.tell())


def _space_flag(comments: list[str], key: str) -> str | None:
    for c in comments:
        m = re.fullmatch(rf"{key}\s+(\S+)", c)
        if m:
            return m.group(1)
    return None


def read_splat_ply(path, opacity_space: str | None = None, scale_space: str | None = None) -> SplatMap:
    """Load a binary little-endian splat PLY.

    Opacities are passed through a logistic and scales exponentiated when the
    header carries ``comment opacity_space logit`` / ``comment scale_space log``
    (or when overridden by the keyword arguments). Quaternions are normalized.
    Insertion indices follow file order.
    """
    path = Path(path)
    with path.open("rb") as fh:
        info = read_ply_header(fh)
        names = [n for n, _ in info.properties]
        for name in MANDATORY:
            if name not in names:
                raise FormatError(f"missing property {name}")
        types = dict(info.properties)
        for name in MANDATORY:
            if types[name] not in ("float", "float32", "double", "float64"):
                raise FormatError(f"property {name} must be float or double, got {types[name]}")
        try:
            dtype = np.dtype([(n, "<" + PLY_TYPES[t]) for n, t in info.properties])
        except KeyError as exc:
            raise FormatError(f"unknown PLY scalar type {exc.args[0]}") from None
        expected = info.count * dtype.itemsize
        payload = fh.read(expected)
    if len(payload) < expected:
        raise PayloadError(
            f"{path}: truncated payload at byte offset {info.header_bytes + len(payload)} "
            f"(expected {info.header_bytes + expected} bytes)"
        )
    data = np.frombuffer(payload, dtype=dtype, count=info.count)

    opacity_space = opacity_space or _space_flag(info.comments, "opacity_space") or "linear"
    scale_space = scale_space or _space_flag(info.comments, "scale_space") or "linear"

    def col(name):
        return data[name].astype(np.float64)

    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    colors = np.stack([col(f"f_dc_{k}") for k in range(3)], axis=1)
    opac = col("opacity")
    if opacity_space == "logit":
        opac = 1.0 / (1.0 + np.exp(-opac))
    elif opacity_space != "linear":
        raise FormatError(f"unknown opacity_space {opacity_space!r}")
    scales = np.stack([col(f"scale_{k}") for k in range(3)], axis=1)
    if scale_space == "log":
        scales = np.exp(scales)
    elif scale_space != "linear":
        raise FormatError(f"unknown scale_space {scale_space!r}")
    scales = np.maximum(scales, EPS_SCALE)
    rots = np.stack([col(f"rot_{k}") for k in range(4)], axis=1)
    grads = col("grad_avg") if "grad_avg" in names else np.zeros(info.count)
    kfs = col("keyframe_index").astype(np.int64) if "keyframe_index" in names else np.zeros(info.count, np.int64)
    rest_names = sorted((n for n in names if n.startswith("f_rest_")), key=lambda n: int(n.split("_")[-1]))
    rest = np.stack([col(n) for n in rest_names], axis=1) if rest_names else np.zeros((info.count, 0))

    prims = []
    for k in range(info.count):
        try:
            prims.append(
                GaussianPrimitive(
                    mean=means[k],
                    rotation=rots[k],
                    scale=scales[k],
                    opacity=opac[k],
                    color=colors[k],
                    grad_stat=grads[k],
                    insertion_index=k,
                    keyframe_index=kfs[k],
                    sh_rest=rest[k],
                )
            )
        except ValueError as exc:
            hint = " (raw logits? pass opacity_space='logit')" if "opacity" in str(exc) else ""
            raise FormatError(f"{path}: vertex {k}: {exc}{hint}") from None
    return SplatMap(prims, info.count)


def _stable_f32_quaternions(q: np.ndarray) -> np.ndarray:
    """float32 quaternions that reproduce themselves under normalize-then-round.

    Makes write -> read (normalizes) -> write bit-identical.
    """
    q32 = q.astype(np.float32)
    for _ in range(4):
        q64 = q32.astype(np.float64)
        nxt = (q64 / np.linalg.norm(q64, axis=1, keepdims=True)).astype(np.float32)
        if np.array_equal(nxt, q32):
            break
        q32 = nxt
    return q32


def splat_ply_properties(n_rest: int) -> list[str]:
    return (
        ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{k}" for k in range(n_rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "grad_avg", "keyframe_index"]
    )


def write_splat_ply(splats: SplatMap, path) -> None:
    """Write a binary little-endian PLY with float32 properties in primitive order."""
    n = len(splats)
    rest_lens = {p.sh_rest.size for p in splats}
    if len(rest_lens) > 1:
        raise ValueError("primitives carry differing numbers of higher SH coefficients")
    n_rest = rest_lens.pop() if rest_lens else 0
    names = splat_ply_properties(n_rest)
    table = np.zeros(n, dtype=[(nm, "<f4") for nm in names])
    if n:
        a = splats.arrays()
        for k, nm in enumerate(("x", "y", "z")):
            table[nm] = a.means[:, k]
        for k in range(3):
            table[f"f_dc_{k}"] = a.colors[:, k]
            table[f"scale_{k}"] = a.scales[:, k]
        if n_rest:
            rest = np.stack([p.sh_rest for p in splats])
            for k in range(n_rest):
                table[f"f_rest_{k}"] = rest[:, k]
        table["opacity"] = a.opacities
        q = _stable_f32_quaternions(a.rotations)
        for k in range(4):
            table[f"rot_{k}"] = q[:, k]
        table["grad_avg"] = a.grad_stats
        table["keyframe_index"] = a.keyframe_indices
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {nm}" for nm in names]
    header.append("end_header")
    blob = ("\n".join(header) + "\n").encode("ascii") + table.tobytes()
    Path(path).write_bytes(blob)


# ---------------------------------------------------------------------------
# keypoints, poses, intrinsics, images
# ---------------------------------------------------------------------------

def read_keypoints_csv(path) -> list[KeypointRecord]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["u", "v", "depth", "active"]:
            raise FormatError(f"{path}: line 1: expected header 'u,v,depth,active'")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != 4:
                    raise ValueError(f"expected 4 fields, got {len(row)}")
                u, v = float(row[0]), float(row[1])
                depth = float(row[2]) if row[2].strip() else math.nan
                flag = row[3].strip().lower()
                if flag not in ("0", "1", "true", "false"):
                    raise ValueError(f"bad active flag {row[3]!r}")
                if not (math.isfinite(u) and math.isfinite(v)):
                    raise ValueError("pixel coordinates must be finite")
            except ValueError as exc:
                raise FormatError(f"{path}: line {line}: {exc}") from None
            out.append(KeypointRecord(u, v, depth, flag in ("1", "true")))
    return out


def write_keypoints_csv(keypoints, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "v", "depth", "active"])
        for kp in keypoints:
            w.writerow([repr(kp.u), repr(kp.v), "" if not math.isfinite(kp.depth) else repr(kp.depth), int(kp.active)])


def read_poses(path) -> list[CameraPose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            vals = [float(x) for x in line.split()]
        except ValueError as exc:
            raise FormatError(f"{path}: line {lineno}: {exc}") from None
        if len(vals) != 16:
            raise FormatError(f"{path}: line {lineno}: expected 16 values, got {len(vals)}")
        poses.append(CameraPose.from_matrix(np.array(vals).reshape(4, 4)))
    return poses


def write_poses(poses, path) -> None:
    lines = [" ".join(repr(float(v)) for v in p.matrix().ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_intrinsics(path) -> PinholeIntrinsics:
    d = json.loads(Path(path).read_text())
    try:
        return PinholeIntrinsics(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing intrinsics key {exc.args[0]}") from None


def write_intrinsics(intr: PinholeIntrinsics, path) -> None:
    d = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "width": intr.width, "height": intr.height}
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def read_depth_png(path, depth_scale: float = DEFAULT_DEPTH_SCALE) -> np.ndarray:
    """16-bit depth PNG to meters; zero pixels become NaN."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise FormatError(f"{path}: expected a 16-bit single-channel PNG, got mode {im.mode}")
        raw = np.array(im).astype(np.float64)
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel image")
    if raw.max(initial=0) > 65535 or raw.min(initial=0) < 0:
        raise FormatError(f"{path}: values outside the 16-bit range")
    depth = raw / depth_scale
    depth[raw == 0] = np.nan
    return depth


def write_depth_png(depth, path, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0)
    raw = np.clip(np.rint(d * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_rgb(path) -> np.ndarray:
    """8-bit RGB PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_rgb(img, path) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
