"""Bit-exact serialization of splat frames and point clouds.

SPLAT record, 32 bytes little-endian, one per splat:

    offset  0: position x, y, z      3 x float32
    offset 12: scales x, y, z        3 x float32
    offset 24: r, g, b, opacity      4 x uint8   round(v * 255)
    offset 28: rotation w, x, y, z   4 x uint8   round(q * 128 + 128)

The quaternion is unit-normalized before quantization.  Because decoding
renormalizes, the byte pattern is additionally snapped to a fixed point of
the decode-encode map, so re-encoding a decoded frame reproduces the bytes
exactly; the snap moves components by at most one quantization step.

Video SPLAT stream ("VSPL"):

    offset  0: magic "VSPL"          4 bytes
    offset  4: version               uint16 (= 1)
    offset  6: frame_count F         uint32
    offset 10: per-frame byte sizes  F x uint32
    then: frame blocks back to back (each a SPLAT payload, 32 | size)

Total size is exactly 10 + 4*F + sum(sizes); no padding anywhere.

PLY point clouds use binary_little_endian 1.0 with properties
x y z (float32), red green blue (uint8), optionally nx ny nz (float32);
the reader also accepts ascii 1.0.  Gaussian PLY follows the common 3DGS
field convention: f_dc_* hold (color - 0.5) / 0.28209479177387814, opacity
is a pre-activation logit, scale_* are log-scales, rot_0..3 the quaternion
(w, x, y, z).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import MalformedFileError
from .pointcloud import PointCloud
from .splats import SplatFrame

VSPLAT_MAGIC = b"VSPL"
VSPLAT_VERSION = 1
SPLAT_RECORD_SIZE = 32
SH_C0 = 0.28209479177387814


def _requantize_step(b: np.ndarray) -> np.ndarray:
    """One decode-then-encode pass over quaternion bytes."""
    v = (b.astype(np.float64) - 128.0) / 128.0
    n = np.linalg.norm(v)
    if n == 0:
        return b
    u = v / n
    return np.clip(np.round(u * 128.0 + 128.0), 0, 255).astype(np.uint8)


def _quantize_quaternion(q: np.ndarray) -> np.ndarray:
    """Quantize a quaternion to 4 bytes, snapped to a requantization fixed point.

    Starting from round(q_unit * 128 + 128), the decode-encode map is
    iterated until the bytes stop changing; should the iteration cycle, the
    lexicographically smallest cycle member is chosen (the same member is
    then chosen again when re-encoding a decoded frame, which is what makes
    encode(decode(encode(x))) == encode(x) exact).
    """
    q = np.asarray(q, dtype=np.float64)
    u = q / np.linalg.norm(q)
    b = np.clip(np.round(u * 128.0 + 128.0), 0, 255).astype(np.uint8)
    index: dict[bytes, int] = {}
    visited: list[bytes] = []
    while bytes(b) not in index:
        index[bytes(b)] = len(visited)
        visited.append(bytes(b))
        b = _requantize_step(b)
    cycle = visited[index[bytes(b)] :]
    return np.frombuffer(min(cycle), dtype=np.uint8)


def encode_splat_frame(frame: SplatFrame) -> bytes:
    """Pack a frame into n * 32 bytes of SPLAT records."""
    n = len(frame)
    out = np.zeros(n, dtype=_SPLAT_DTYPE)
    out["pos"] = frame.mu.astype("<f4")
    out["scale"] = frame.scales.astype("<f4")
    rgba = np.clip(np.round(np.concatenate([frame.color, frame.opacity[:, None]], axis=1) * 255.0), 0, 255)
    out["rgba"] = rgba.astype(np.uint8)
    for i in range(n):
        out["rot"][i] = _quantize_quaternion(frame.rot[i])
    return out.tobytes()


_SPLAT_DTYPE = np.dtype(
    [("pos", "<f4", 3), ("scale", "<f4", 3), ("rgba", "u1", 4), ("rot", "u1", 4)]
)
assert _SPLAT_DTYPE.itemsize == SPLAT_RECORD_SIZE


def decode_splat_frame(data: bytes, source_camera: str = "", frame_index: int = 0) -> SplatFrame:
    """Unpack SPLAT records; quaternions are renormalized to unit length."""
    if len(data) % SPLAT_RECORD_SIZE != 0:
        offset = (len(data) // SPLAT_RECORD_SIZE) * SPLAT_RECORD_SIZE
        raise MalformedFileError(
            f"SPLAT payload length {len(data)} is not a multiple of {SPLAT_RECORD_SIZE}", offset=offset
        )
    rec = np.frombuffer(data, dtype=_SPLAT_DTYPE)
    mu = rec["pos"].astype(np.float64)
    scales = rec["scale"].astype(np.float64)
    rgba = rec["rgba"].astype(np.float64) / 255.0
    rot = (rec["rot"].astype(np.float64) - 128.0) / 128.0
    norms = np.linalg.norm(rot, axis=1)
    zero = norms == 0
    rot[zero] = [1.0, 0.0, 0.0, 0.0]
    norms[zero] = 1.0
    rot = rot / norms[:, None]
    return SplatFrame(mu, rot, scales, rgba[:, :3], rgba[:, 3], source_camera, frame_index)


def encode_video_splat(frames: list[SplatFrame]) -> bytes:
    """Concatenate per-frame SPLAT payloads behind a size-table header."""
    blocks = [encode_splat_frame(f) for f in frames]
    header = struct.pack("<4sHI", VSPLAT_MAGIC, VSPLAT_VERSION, len(blocks))
    sizes = struct.pack(f"<{len(blocks)}I", *[len(b) for b in blocks])
    return header + sizes + b"".join(blocks)


def decode_video_splat(data: bytes) -> list[SplatFrame]:
    """Parse a video SPLAT stream, validating the header strictly."""
    if len(data) < 10:
        raise MalformedFileError(f"stream too short for header ({len(data)} bytes)", offset=len(data))
    magic, version, count = struct.unpack("<4sHI", data[:10])
    if magic != VSPLAT_MAGIC:
        raise MalformedFileError(f"bad magic {magic!r}, expected {VSPLAT_MAGIC!r}", offset=0)
    if version != VSPLAT_VERSION:
        raise MalformedFileError(f"unsupported version {version}", offset=4)
    table_end = 10 + 4 * count
    if len(data) < table_end:
        raise MalformedFileError(
            f"size table needs {4 * count} bytes, only {len(data) - 10} present", offset=10
        )
    sizes = struct.unpack(f"<{count}I", data[10:table_end]) if count else ()
    for i, s in enumerate(sizes):
        if s % SPLAT_RECORD_SIZE != 0:
            raise MalformedFileError(
                f"frame {i} size {s} is not a multiple of {SPLAT_RECORD_SIZE}", offset=10 + 4 * i
            )
    total = sum(sizes)
    if total != len(data) - table_end:
        raise MalformedFileError(
            f"size table sums to {total} but payload holds {len(data) - table_end} bytes",
            offset=table_end,
        )
    frames = []
    pos = table_end
    for i, s in enumerate(sizes):
        frames.append(decode_splat_frame(data[pos : pos + s], frame_index=i))
        pos += s
    return frames


# --- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("u1", 1),
    "uint8": ("u1", 1),
    "char": ("i1", 1),
    "int8": ("i1", 1),
    "short": ("<i2", 2),
    "ushort": ("<u2", 2),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
}


def _parse_ply_header(data: bytes):
    end = data.find(b"end_header\n")
    if end < 0:
        raise MalformedFileError("PLY header terminator not found", offset=0)
    body_start = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedFileError("not a PLY file (missing 'ply' magic line)", offset=0)
    fmt = None
    elements = []  # (name, count, [(prop_name, type_str)])
    for ln in lines[1:]:
        parts = ln.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MalformedFileError("property before any element in PLY header")
            if parts[1] == "list":
                raise MalformedFileError("list properties are not supported")
            elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise MalformedFileError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _read_vertex_table(data: bytes):
    """Returns (columns dict name -> float64 array, vertex count)."""
    fmt, elements, body = _parse_ply_header(data)
    vertex = None
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props)
        elif count > 0:
            raise MalformedFileError(f"unsupported PLY element {name!r} with {count} entries")
    if vertex is None:
        raise MalformedFileError("PLY file has no vertex element")
    count, props = vertex
    for pname, ptype in props:
        if ptype not in _PLY_TYPES:
            raise MalformedFileError(f"unsupported PLY property type {ptype!r} for {pname!r}")
    if fmt == "binary_little_endian":
        dt = np.dtype([(pname, _PLY_TYPES[ptype][0]) for pname, ptype in props])
        need = body + dt.itemsize * count
        if len(data) < need:
            raise MalformedFileError(
                f"vertex payload truncated: need {dt.itemsize * count} bytes, have {len(data) - body}",
                offset=len(data),
            )
        table = np.frombuffer(data[body : body + dt.itemsize * count], dtype=dt)
        return {pname: table[pname].astype(np.float64) for pname, _ in props}, count
    # ascii
    tokens = data[body:].decode("ascii").split()
    ncols = len(props)
    if len(tokens) < count * ncols:
        raise MalformedFileError(
            f"ascii vertex table truncated: need {count * ncols} values, have {len(tokens)}"
        )
    arr = np.array(tokens[: count * ncols], dtype=np.float64).reshape(count, ncols)
    return {pname: arr[:, i] for i, (pname, _) in enumerate(props)}, count


def _need(cols: dict, name: str):
    if name not in cols:
        raise MalformedFileError(f"PLY vertex element is missing property {name!r}")
    return cols[name]


def write_ply_pointcloud(cloud: PointCloud) -> bytes:
    """Binary little-endian PLY with x y z, red green blue, optional normals."""
    n = len(cloud)
    with_normals = cloud.normals is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {ax}" for ax in "xyz"]
    header += [f"property uchar {ch}" for ch in ("red", "green", "blue")]
    if with_normals:
        header += [f"property float n{ax}" for ax in "xyz"]
    header.append("end_header")
    fields = [("pos", "<f4", 3), ("rgb", "u1", 3)]
    if with_normals:
        fields.append(("nrm", "<f4", 3))
    table = np.zeros(n, dtype=np.dtype(fields))
    table["pos"] = cloud.positions.astype("<f4")
    table["rgb"] = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    if with_normals:
        table["nrm"] = cloud.normals.astype("<f4")
    return ("\n".join(header) + "\n").encode("ascii") + table.tobytes()


def read_ply_pointcloud(data: bytes, source_camera: str = "") -> PointCloud:
    cols, n = _read_vertex_table(data)
    pos = np.stack([_need(cols, ax) for ax in "xyz"], axis=1)
    if "red" in cols:
        colors = np.stack([_need(cols, ch) for ch in ("red", "green", "blue")], axis=1) / 255.0
    else:
        colors = np.zeros((n, 3))
    normals = None
    if "nx" in cols:
        normals = np.stack([_need(cols, f"n{ax}") for ax in "xyz"], axis=1)
        lengths = np.linalg.norm(normals, axis=1)
        ok = np.isfinite(lengths) & (lengths > 0)
        normals = np.where(ok[:, None], normals / np.where(ok, lengths, 1.0)[:, None], np.nan)
    return PointCloud(pos, np.clip(colors, 0.0, 1.0), normals, source_camera)


_GAUSS_PROPS = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def write_ply_gaussian(frame: SplatFrame) -> bytes:
    """3DGS-convention PLY: pre-activation opacity logits and log-scales."""
    n = len(frame)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _GAUSS_PROPS]
    header.append("end_header")
    table = np.zeros((n, len(_GAUSS_PROPS)), dtype=np.float64)
    table[:, 0:3] = frame.mu
    table[:, 3:6] = (frame.color - 0.5) / SH_C0
    with np.errstate(divide="ignore"):
        o = frame.opacity
        table[:, 6] = np.log(o) - np.log1p(-o)  # logit; +-inf at the range ends
        table[:, 7:10] = np.log(frame.scales)
    table[:, 10:14] = frame.rot
    return ("\n".join(header) + "\n").encode("ascii") + table.astype("<f4").tobytes()


def read_ply_gaussian(data: bytes, source_camera: str = "", frame_index: int = 0) -> SplatFrame:
    cols, n = _read_vertex_table(data)
    vals = {p: _need(cols, p) for p in _GAUSS_PROPS}
    mu = np.stack([vals["x"], vals["y"], vals["z"]], axis=1)
    color = np.clip(0.5 + SH_C0 * np.stack([vals[f"f_dc_{i}"] for i in range(3)], axis=1), 0.0, 1.0)
    with np.errstate(over="ignore"):
        opacity = 1.0 / (1.0 + np.exp(-vals["opacity"]))
        scales = np.exp(np.stack([vals[f"scale_{i}"] for i in range(3)], axis=1))
    rot = np.stack([vals[f"rot_{i}"] for i in range(4)], axis=1)
    norms = np.linalg.norm(rot, axis=1)
    zero = norms == 0
    rot[zero] = [1.0, 0.0, 0.0, 0.0]
    norms[zero] = 1.0
    rot = rot / norms[:, None]
    return SplatFrame(mu, rot, scales, color, opacity, source_camera, frame_index)
