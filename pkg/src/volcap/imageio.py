"""File formats for depth, masks, color, and optical flow.

Depth maps travel as 16-bit grayscale images holding millimeters, with 0 as
the invalid-pixel sentinel.  Masks are 8-bit grayscale, values above 127 are
foreground.  Color/guidance images are 8-bit RGB, mapped to [0, 1] floats in
memory.  Flow fields use the Middlebury ``.flo`` layout: a float32 magic
202021.25, int32 width and height, then interleaved x/y float32 components,
all little-endian.  Disparity maps reuse the same container with a single
channel, or a 16-bit fixed-point image at 1/16 px per unit (0 = invalid).
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import MalformedFileError

FLO_MAGIC = 202021.25
DEPTH_UNIT_MM = 1000.0  # meters -> stored integer millimeters


def write_depth_png(path, values_m: np.ndarray, valid: np.ndarray) -> None:
    """Store depth in meters as 16-bit millimeters; invalid pixels become 0."""
    mm = np.round(np.asarray(values_m, dtype=float) * DEPTH_UNIT_MM)
    mm = np.clip(mm, 0, 65535).astype(np.uint16)
    mm[~np.asarray(valid, dtype=bool)] = 0
    Image.fromarray(mm).save(path, format="PNG")


def read_depth_png(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (values_m, valid).  Invalid pixels carry 0.0 meters."""
    arr = np.array(Image.open(path))
    if arr.ndim != 2:
        raise MalformedFileError(f"{path}: depth image must be single channel")
    mm = arr.astype(np.float64)
    valid = mm > 0
    return mm / DEPTH_UNIT_MM, valid


def write_mask_png(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    arr = np.array(Image.open(path).convert("L"))
    return arr > 127


def write_color_png(path, rgb01: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb01, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_color_png(path) -> np.ndarray:
    arr = np.array(Image.open(path).convert("RGB"))
    return arr.astype(np.float64) / 255.0


def write_flo(path, flow: np.ndarray) -> None:
    """Write an H x W x 2 flow field in the Middlebury binary layout."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise MalformedFileError("flow must be H x W x 2")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(flow.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise MalformedFileError(f"{path}: truncated flow header", offset=len(data))
    magic, w, h = struct.unpack("<fii", data[:12])
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise MalformedFileError(f"{path}: bad flow magic {magic}", offset=0)
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise MalformedFileError(
            f"{path}: flow payload is {len(data) - 12} bytes, expected {8 * w * h}", offset=12
        )
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2).astype(np.float64)


def write_disparity_flo(path, values_px: np.ndarray, valid: np.ndarray) -> None:
    """Single-channel float disparity in the .flo-style container.

    Invalid pixels are stored as NaN.
    """
    vals = np.asarray(values_px, dtype=np.float32).copy()
    vals[~np.asarray(valid, dtype=bool)] = np.nan
    h, w = vals.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(vals.astype("<f4").tobytes())


def read_disparity_flo(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise MalformedFileError(f"{path}: truncated disparity header", offset=len(data))
    magic, w, h = struct.unpack("<fii", data[:12])
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise MalformedFileError(f"{path}: bad disparity magic {magic}", offset=0)
    if len(data) != 12 + 4 * w * h:
        raise MalformedFileError(
            f"{path}: disparity payload is {len(data) - 12} bytes, expected {4 * w * h}", offset=12
        )
    vals = np.frombuffer(data[12:], dtype="<f4").reshape(h, w).astype(np.float64)
    valid = np.isfinite(vals)
    vals = np.where(valid, vals, 0.0)
    return vals, valid


DISPARITY_FIXED_SCALE = 16.0  # 1/16 px fixed point


def write_disparity_png(path, values_px: np.ndarray, valid: np.ndarray) -> None:
    """16-bit fixed-point disparity (1/16 px units, 0 = invalid).

    Only non-negative disparities are representable; use the .flo-style
    container for signed fields.
    """
    q = np.round(np.asarray(values_px, dtype=float) * DISPARITY_FIXED_SCALE)
    q = np.clip(q, 0, 65535).astype(np.uint16)
    q[~np.asarray(valid, dtype=bool)] = 0
    Image.fromarray(q).save(path, format="PNG")


def read_disparity_png(path) -> tuple[np.ndarray, np.ndarray]:
    arr = np.array(Image.open(path))
    if arr.ndim != 2:
        raise MalformedFileError(f"{path}: disparity image must be single channel")
    q = arr.astype(np.float64)
    valid = q > 0
    return q / DISPARITY_FIXED_SCALE, valid
