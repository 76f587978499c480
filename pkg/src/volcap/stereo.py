"""Rectified-stereo depth: disparity conversion, the flipping identity,
flip-patch triggering, pair gating, and a deterministic block matcher.

Disparity sign convention: for inputs (first, second) in left-right order,
a pixel (u, v) in the first image corresponds to (u - d, v) in the second,
with d >= 0 for scene points in front of the cameras.  Depth follows from
Z = f * B / d.

Estimators trained or built for the left-right ordering can serve the
reversed ordering through the flipping identity

    -flip(d(L, R)) = d(flip(L), flip(R)),

where flip is a horizontal mirror.  The block matcher here searches a
symmetric disparity range and sums its matching windows in a horizontally
symmetric order, which makes the identity hold exactly (ambiguous pixels,
where cost ties would otherwise break the symmetry, are invalidated by the
uniqueness-ratio test on both sides alike).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, backproject_pixel, camera_to_world, project_points
from .depthfilter import DepthMap, GuidanceImage
from .errors import InvalidInputError

DEFAULT_MIN_DISPARITY = 0.5  # px; Z = f*B/d diverges below this floor
DEFAULT_UNIQUENESS_RATIO = 0.9


@dataclass(frozen=True)
class RectifiedPair:
    """Two rectified views with shared focal length (px) and baseline (m)."""

    first: GuidanceImage
    second: GuidanceImage
    f: float
    B: float

    def __post_init__(self):
        if self.first.values.shape != self.second.values.shape:
            raise InvalidInputError("rectified images must share dimensions")
        if self.f <= 0 or self.B <= 0:
            raise InvalidInputError("focal length and baseline must be positive")

    @property
    def width(self) -> int:
        return self.first.width


@dataclass(frozen=True)
class DisparityMap:
    """Per-pixel disparity in pixels with a validity mask.

    Values may be signed; positive under the left-right input ordering.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise InvalidInputError("disparity values and mask must be matching 2-D arrays")
        if np.any(valid & ~np.isfinite(values)):
            raise InvalidInputError("valid disparities must be finite")
        values = np.where(valid, values, 0.0)
        values.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def disparity_to_depth(
    d: DisparityMap, f: float, B: float, d_min: float = DEFAULT_MIN_DISPARITY
) -> DepthMap:
    """Z = f * B / d on valid pixels with d > d_min; the rest invalid."""
    if f <= 0 or B <= 0:
        raise InvalidInputError("focal length and baseline must be positive")
    ok = d.valid & (d.values > d_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(ok, f * B / np.where(ok, d.values, 1.0), 0.0)
    return DepthMap(z, ok)


def depth_to_disparity(depth: DepthMap, f: float, B: float) -> DisparityMap:
    """Inverse of disparity_to_depth on valid pixels: d = f * B / Z."""
    if f <= 0 or B <= 0:
        raise InvalidInputError("focal length and baseline must be positive")
    ok = depth.valid
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(ok, f * B / np.where(ok, depth.values, 1.0), 0.0)
    return DisparityMap(d, ok)


def flip_disparity(d: DisparityMap) -> DisparityMap:
    """Mirror-and-negate: out(u, v) = -d(W-1-u, v), validity mirrored."""
    return DisparityMap(-d.values[:, ::-1], d.valid[:, ::-1])


def negate_disparity(d: DisparityMap) -> DisparityMap:
    return DisparityMap(-d.values, d.valid)


def flip_image(img: GuidanceImage) -> GuidanceImage:
    return GuidanceImage(img.values[:, ::-1])


def should_apply_flip_patch(mask_first: np.ndarray, mask_second: np.ndarray) -> bool | None:
    """Whether the inputs are in reversed geometric order.

    True when the median foreground x-coordinate of the first image is
    strictly smaller than that of the second (the first camera then sits on
    the right).  Returns None when either foreground is empty; callers skip
    the pair in that case.
    """
    xs_first = np.nonzero(np.asarray(mask_first, dtype=bool))[1]
    xs_second = np.nonzero(np.asarray(mask_second, dtype=bool))[1]
    if xs_first.size == 0 or xs_second.size == 0:
        return None
    return bool(np.median(xs_first) < np.median(xs_second))


def _shift_x(arr: np.ndarray, dx: int, fill) -> np.ndarray:
    """out[:, x] = arr[:, x + dx], filled outside."""
    out = np.full_like(arr, fill)
    w = arr.shape[1]
    dst = slice(max(0, -dx), min(w, w - dx))
    src = slice(max(0, dx), min(w, w + dx))
    out[:, dst] = arr[:, src]
    return out


def _shift_y(arr: np.ndarray, dy: int, fill) -> np.ndarray:
    out = np.full_like(arr, fill)
    h = arr.shape[0]
    dst = slice(max(0, -dy), min(h, h - dy))
    src = slice(max(0, dy), min(h, h + dy))
    out[dst, :] = arr[src, :]
    return out


def estimate_disparity_blockmatch(
    pair: RectifiedPair,
    window: int = 5,
    d_max: int = 32,
    uniqueness_ratio: float = DEFAULT_UNIQUENESS_RATIO,
) -> DisparityMap:
    """Winner-take-all SAD block matching over the signed range [-d_max, d_max].

    A pixel keeps its best disparity only when best_cost < ratio * second
    best cost over all other candidates; ambiguous pixels (including exact
    cost ties) are invalidated.  Window sums pair the +dx and -dx columns
    before accumulating, so costs are exactly mirror-symmetric and the
    flipping identity holds bit-for-bit.
    """
    if window < 1 or window % 2 == 0:
        raise InvalidInputError(f"window must be odd and >= 1, got {window}")
    if d_max >= pair.width:
        raise InvalidInputError("d_max must be smaller than the image width")
    a = pair.first.values
    b = pair.second.values
    h, w = a.shape[:2]
    r = window // 2
    best = np.full((h, w), np.inf)
    second = np.full((h, w), np.inf)
    best_d = np.zeros((h, w))
    ones = np.ones((h, w), dtype=bool)
    for d in range(-d_max, d_max + 1):
        b_sh = _shift_x(b, -d, 0.0)
        ok = _shift_x(ones, -d, False)
        diff = np.abs(a - b_sh).sum(axis=2)
        colsum = np.zeros((h, w))
        colok = np.ones((h, w), dtype=bool)
        for wy in range(-r, r + 1):
            colsum = colsum + _shift_y(diff, wy, 0.0)
            colok &= _shift_y(ok, wy, False)
        cost = colsum.copy()
        costok = colok.copy()
        for wx in range(1, r + 1):
            cost = cost + (_shift_x(colsum, wx, 0.0) + _shift_x(colsum, -wx, 0.0))
            costok &= _shift_x(colok, wx, False) & _shift_x(colok, -wx, False)
        cost = np.where(costok, cost, np.inf)
        better = cost < best
        second = np.where(better, best, np.minimum(second, cost))
        best_d = np.where(better, float(d), best_d)
        best = np.where(better, cost, best)
    keep = np.isfinite(best) & (best < uniqueness_ratio * second)
    return DisparityMap(np.where(keep, best_d, 0.0), keep)


def compute_pair_overlap(
    cam_a: Camera,
    cam_b: Camera,
    near: float = 0.5,
    far: float = 3.5,
    grid: tuple[int, int, int] = (32, 24, 12),
) -> float:
    """Fraction of cam_a frustum samples (working range near..far) visible in cam_b.

    Sampling is a deterministic midpoint grid over pixels and depths; the
    visibility bounds carry a 1e-9 slack so a camera fully overlaps itself.
    """
    nu, nv, nd = grid
    Ka = cam_a.intrinsics
    us = (np.arange(nu) + 0.5) / nu * (Ka.width - 1.0)
    vs = (np.arange(nv) + 0.5) / nv * (Ka.height - 1.0)
    ds = (np.arange(nd) + 0.5) / nd * (far - near) + near
    uu, vv, dd = np.meshgrid(us, vs, ds, indexing="ij")
    pts_cam = np.stack(
        [
            (uu - Ka.c_x) / Ka.f_x * dd,
            (vv - Ka.c_y) / Ka.f_y * dd,
            dd,
        ],
        axis=-1,
    ).reshape(-1, 3)
    pts_world = camera_to_world(pts_cam, cam_a.pose)
    u, v, z = project_points(pts_world, cam_b)
    Kb = cam_b.intrinsics
    eps = 1e-9
    visible = (
        (z > 0)
        & (u >= -eps)
        & (u <= Kb.width - 1 + eps)
        & (v >= -eps)
        & (v <= Kb.height - 1 + eps)
    )
    return float(np.mean(visible))


def gate_pair(cam_a: Camera, cam_b: Camera, min_overlap: float = 0.5) -> bool:
    """Accept the stereo pair when frustum overlap stays substantial."""
    return compute_pair_overlap(cam_a, cam_b) >= min_overlap


def stereo_depth_for_pair(
    first: GuidanceImage,
    second: GuidanceImage,
    mask_first: np.ndarray,
    mask_second: np.ndarray,
    f: float,
    B: float,
    window: int = 5,
    d_max: int = 32,
    d_min: float = DEFAULT_MIN_DISPARITY,
) -> DepthMap | None:
    """Depth anchored on the first view, applying the flip patch when needed.

    When the foreground median of the first image lies left of the second's,
    both inputs are mirrored before matching and the resulting disparity is
    mirrored and negated back, restoring the positive-disparity convention.
    Returns None when either foreground is empty (pair skipped).  The output
    is restricted to the first view's foreground mask.
    """
    patch = should_apply_flip_patch(mask_first, mask_second)
    if patch is None:
        return None
    if patch:
        pair = RectifiedPair(flip_image(first), flip_image(second), f, B)
        d_est = estimate_disparity_blockmatch(pair, window=window, d_max=d_max)
        d_first = negate_disparity(flip_disparity(d_est))
    else:
        pair = RectifiedPair(first, second, f, B)
        d_first = estimate_disparity_blockmatch(pair, window=window, d_max=d_max)
    depth = disparity_to_depth(d_first, f, B, d_min=d_min)
    mask = np.asarray(mask_first, dtype=bool)
    keep = depth.valid & mask
    return DepthMap(np.where(keep, depth.values, 0.0), keep)
