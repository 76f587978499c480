"""Depth-map cleaning: outlier removal, mask-edge erosion, and guided
bilateral filtering in spatial (BS) and spatiotemporal (BS+T) variants.

The spatial filter computes, at every pixel x with at least one valid
neighbor,

    D_f(x) = sum_i D(x_i) G_s(|x_i - x|) G_r(|I(x_i) - I(x)|) / sum_i (same weights)

over the (2r+1)^2 window around x, restricted to valid depth pixels.  The
spatiotemporal variant adds a flow-warped temporal term to numerator and
denominator:

    + lambda_t * D_warp(x) * G_t(|I_warp(x) - I(x)|)      (numerator)
    + lambda_t * G_t(|I_warp(x) - I(x)|)                  (denominator)

where D_warp, I_warp are the previous filtered depth and guidance warped to
the current frame by the backward flow.  Pixels with no spatial support but
valid temporal support therefore receive the warped value (hole filling);
pixels with neither stay invalid.

Gaussian kernels are used without the 1/(sigma*sqrt(2*pi)) prefactor; for
the purely spatial filter the prefactor cancels in the ratio, and the
temporal weight lambda_t is calibrated against the unnormalized kernels.
Accumulation uses compensated (Kahan) summation in float64 so the result is
independent of neighbor traversal order to well below 1e-9.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth (meters) with a validity mask.

    Invalid pixels carry the sentinel value 0.0 and must never be read as
    data.  Valid pixels are positive and finite.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2 or values.shape != valid.shape:
            raise InvalidInputError("depth values and validity mask must be matching 2-D arrays")
        bad = valid & ~(np.isfinite(values) & (values > 0))
        if np.any(bad):
            raise InvalidInputError(f"{int(bad.sum())} valid pixels have non-positive or non-finite depth")
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


@dataclass(frozen=True)
class GuidanceImage:
    """RGB guidance with channels in [0, 1], shape H x W x 3."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 3:
            raise InvalidInputError("guidance image must be H x W x 3")
        if values.min() < 0.0 or values.max() > 1.0:
            raise InvalidInputError("guidance channels must lie in [0, 1]")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FlowField:
    """Backward flow (frame t samples frame t-1 at x + flow(x)), pixels."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] != 2:
            raise InvalidInputError("flow field must be H x W x 2")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("flow field must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BilateralParams:
    """Window radius and kernel widths for the bilateral filters.

    sigma_r and sigma_t act on l2 RGB differences on the 0-1 scale.
    """

    r: int = 7
    sigma_s: float = 7.0
    sigma_r: float = 0.1
    sigma_t: float = 0.06
    lambda_t: float = 0.6

    def __post_init__(self):
        if self.r < 1:
            raise InvalidInputError(f"window radius must be >= 1, got {self.r}")
        if min(self.sigma_s, self.sigma_r, self.sigma_t) <= 0:
            raise InvalidInputError("all kernel sigmas must be positive")
        if self.lambda_t < 0:
            raise InvalidInputError("temporal weight must be >= 0")


def quantile_outlier_removal(depth: DepthMap, mask: np.ndarray, q: float = 0.999) -> DepthMap:
    """Invalidate background pixels and far foreground outliers.

    Pixels outside the foreground mask become invalid.  Foreground pixels
    whose depth exceeds the one-sided upper q-quantile (linear interpolation
    over the sorted valid foreground depths) are invalidated; everything at
    or below the quantile is kept untouched.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.values.shape:
        raise InvalidInputError("mask dimensions must match the depth map")
    if not 0.0 <= q <= 1.0:
        raise InvalidInputError(f"quantile must lie in [0, 1], got {q}")
    valid = depth.valid & mask
    fg = depth.values[valid]
    if fg.size == 0:
        warnings.warn("quantile_outlier_removal: empty foreground, all pixels invalidated", RuntimeWarning)
        return DepthMap(np.zeros_like(depth.values), np.zeros_like(valid))
    threshold = np.quantile(fg, q)
    keep = valid & (depth.values <= threshold)
    return DepthMap(np.where(keep, depth.values, 0.0), keep)


def _hysteresis_edges(gray: np.ndarray, low_frac: float, high_frac: float) -> np.ndarray:
    """Sobel gradient-magnitude edges with hysteresis linking.

    Thresholds are fractions of the maximum gradient magnitude.  Weak edge
    pixels survive only when 8-connected to a strong one.
    """
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    grad = np.hypot(gx, gy)
    gmax = grad.max()
    if gmax == 0:
        return np.zeros_like(gray, dtype=bool)
    strong = grad >= high_frac * gmax
    weak = grad >= low_frac * gmax
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(gray, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def erode_mask_edges(
    depth: DepthMap,
    mask: np.ndarray,
    edge_low: float = 0.1,
    edge_high: float = 0.2,
    erode_px: int = 2,
) -> DepthMap:
    """Invalidate depth near detected mask edges (and outside the mask).

    Edges are detected on the background side of the mask contour with a
    Sobel + hysteresis detector; the image border counts as background.
    Foreground depth pixels within Euclidean distance ``erode_px`` of an
    edge pixel are invalidated, which removes an ``erode_px``-wide rim from
    solid regions.  Interior pixels are untouched.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.values.shape:
        raise InvalidInputError("mask dimensions must match the depth map")
    if not 0.0 <= edge_low <= edge_high:
        raise InvalidInputError("thresholds must satisfy 0 <= edge_low <= edge_high")
    pad = 1
    padded = np.pad(mask, pad, constant_values=False)
    edges = _hysteresis_edges(padded.astype(np.float64), edge_low, edge_high)
    edges_bg = edges & ~padded
    if np.any(edges_bg):
        dist = ndimage.distance_transform_edt(~edges_bg)
        near_edge = (dist <= erode_px)[pad:-pad, pad:-pad]
    else:
        near_edge = np.zeros_like(mask)
    keep = depth.valid & mask & ~near_edge
    return DepthMap(np.where(keep, depth.values, 0.0), keep)


def apply_mask(depth: DepthMap, mask: np.ndarray) -> DepthMap:
    """Restrict validity to the given foreground mask."""
    mask = np.asarray(mask, dtype=bool)
    keep = depth.valid & mask
    return DepthMap(np.where(keep, depth.values, 0.0), keep)


def _window_offsets(r: int) -> list[tuple[int, int]]:
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def _shifted(arr: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """out[y, x] = arr[y + dy, x + dx], out-of-bounds filled."""
    h, w = arr.shape[:2]
    out = np.full_like(arr, fill)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = arr[ys_src, xs_src]
    return out


class _KahanSum:
    """Compensated elementwise accumulator over a 2-D grid."""

    def __init__(self, shape):
        self.s = np.zeros(shape)
        self.c = np.zeros(shape)

    def add(self, x: np.ndarray) -> None:
        y = x - self.c
        t = self.s + y
        self.c = (t - self.s) - y
        self.s = t


def _accumulate_spatial(
    depth: DepthMap, guide: GuidanceImage, p: BilateralParams, offsets
) -> tuple[_KahanSum, _KahanSum]:
    vals = depth.values
    valid = depth.valid
    g = guide.values
    num = _KahanSum(vals.shape)
    den = _KahanSum(vals.shape)
    inv_2ss = 1.0 / (2.0 * p.sigma_s * p.sigma_s)
    inv_2sr = 1.0 / (2.0 * p.sigma_r * p.sigma_r)
    for dy, dx in offsets:
        d_n = _shifted(vals, dy, dx, 0.0)
        v_n = _shifted(valid, dy, dx, False)
        g_n = _shifted(g, dy, dx, 0.0)
        diff = g_n - g
        color_sq = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        w = np.exp(-(dy * dy + dx * dx) * inv_2ss - color_sq * inv_2sr)
        w = np.where(v_n, w, 0.0)
        num.add(w * d_n)
        den.add(w)
    return num, den


def bilateral_spatial(
    depth: DepthMap, guide: GuidanceImage, p: BilateralParams | None = None, _offsets=None
) -> DepthMap:
    """Color-guided bilateral depth filter (BS).

    Every pixel whose window contains at least one valid depth pixel gets
    the normalized weighted average; pixels with no valid neighbor remain
    invalid.  ``_offsets`` overrides the window traversal order and exists
    for order-invariance testing only.
    """
    p = p or BilateralParams()
    if guide.values.shape[:2] != depth.values.shape:
        raise InvalidInputError("guidance dimensions must match the depth map")
    offsets = _offsets if _offsets is not None else _window_offsets(p.r)
    num, den = _accumulate_spatial(depth, guide, p, offsets)
    out_valid = den.s > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(out_valid, num.s / np.where(out_valid, den.s, 1.0), 0.0)
    return DepthMap(out, out_valid)


def warp_by_flow(source, flow: FlowField):
    """Resample ``source`` at x + flow(x) with bilinear interpolation.

    Guidance images are sampled with clamp-to-edge.  Depth maps are sampled
    over valid taps only: the output pixel is invalid when any tap with
    nonzero bilinear weight is invalid or falls outside the image.
    """
    fv = flow.values
    if isinstance(source, GuidanceImage):
        h, w = source.height, source.width
        if fv.shape[:2] != (h, w):
            raise InvalidInputError("flow dimensions must match the image")
        xs = np.arange(w)[None, :] + fv[..., 0]
        ys = np.arange(h).reshape(-1, 1) + fv[..., 1]
        xs = np.clip(xs, 0.0, w - 1.0)
        ys = np.clip(ys, 0.0, h - 1.0)
        x0 = np.floor(xs).astype(int)
        y0 = np.floor(ys).astype(int)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = xs - x0
        fy = ys - y0
        v = source.values
        out = (
            v[y0, x0] * ((1 - fx) * (1 - fy))[..., None]
            + v[y0, x1] * (fx * (1 - fy))[..., None]
            + v[y1, x0] * ((1 - fx) * fy)[..., None]
            + v[y1, x1] * (fx * fy)[..., None]
        )
        return GuidanceImage(np.clip(out, 0.0, 1.0))

    if isinstance(source, DepthMap):
        h, w = source.height, source.width
        if fv.shape[:2] != (h, w):
            raise InvalidInputError("flow dimensions must match the depth map")
        xs = np.arange(w)[None, :] + fv[..., 0]
        ys = np.arange(h).reshape(-1, 1) + fv[..., 1]
        x0 = np.floor(xs).astype(int)
        y0 = np.floor(ys).astype(int)
        fx = xs - x0
        fy = ys - y0
        vals = source.values
        valid = source.valid
        out = np.zeros((h, w))
        ok = np.ones((h, w), dtype=bool)
        for tap_y, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for tap_x, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                wgt = wx * wy
                contributes = wgt > 0
                inb = (tap_x >= 0) & (tap_x < w) & (tap_y >= 0) & (tap_y < h)
                cx = np.clip(tap_x, 0, w - 1)
                cy = np.clip(tap_y, 0, h - 1)
                tap_ok = inb & valid[cy, cx]
                ok &= np.where(contributes, tap_ok, True)
                out += np.where(contributes & tap_ok, wgt * vals[cy, cx], 0.0)
        # With all contributing taps valid the weights sum to 1 over positive
        # depths, so `ok` alone decides validity.
        return DepthMap(np.where(ok, out, 0.0), ok)

    raise InvalidInputError(f"cannot warp objects of type {type(source).__name__}")


def bilateral_spatiotemporal(
    depth_t: DepthMap,
    guide_t: GuidanceImage,
    prev_filtered: DepthMap,
    prev_guide: GuidanceImage,
    flow: FlowField,
    p: BilateralParams | None = None,
    _offsets=None,
) -> DepthMap:
    """Flow-warped spatiotemporal bilateral depth filter (BS+T).

    With lambda_t = 0 the temporal accumulation is skipped entirely and the
    output is bit-identical to ``bilateral_spatial`` on the same inputs.
    """
    p = p or BilateralParams()
    shape = depth_t.values.shape
    if (
        guide_t.values.shape[:2] != shape
        or prev_filtered.values.shape != shape
        or prev_guide.values.shape[:2] != shape
        or flow.values.shape[:2] != shape
    ):
        raise InvalidInputError("all BS+T inputs must share the same dimensions")
    offsets = _offsets if _offsets is not None else _window_offsets(p.r)
    num, den = _accumulate_spatial(depth_t, guide_t, p, offsets)
    if p.lambda_t > 0:
        d_warp = warp_by_flow(prev_filtered, flow)
        i_warp = warp_by_flow(prev_guide, flow)
        diff = i_warp.values - guide_t.values
        color_sq = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
        wt = p.lambda_t * np.exp(-color_sq / (2.0 * p.sigma_t * p.sigma_t))
        wt = np.where(d_warp.valid, wt, 0.0)
        num.add(wt * d_warp.values)
        den.add(wt)
    out_valid = den.s > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(out_valid, num.s / np.where(out_valid, den.s, 1.0), 0.0)
    return DepthMap(out, out_valid)


def bilateral_spatial_preview(
    depth: DepthMap,
    guide: GuidanceImage,
    p: BilateralParams | None = None,
    threads: int = 1,
) -> DepthMap:
    """Throughput-oriented BS variant for the online preview path.

    Computes in float32 over the bounding box of the valid region (expanded
    by the window radius) and optionally partitions rows across threads.
    Results track ``bilateral_spatial`` to preview accuracy (~1e-3 m); the
    reference filter remains the archival-quality path.
    """
    p = p or BilateralParams()
    if guide.values.shape[:2] != depth.values.shape:
        raise InvalidInputError("guidance dimensions must match the depth map")
    h, w = depth.values.shape
    ys, xs = np.nonzero(depth.valid)
    out_vals = np.zeros((h, w), dtype=np.float64)
    out_valid = np.zeros((h, w), dtype=bool)
    if ys.size == 0:
        return DepthMap(out_vals, out_valid)
    y0 = max(0, ys.min() - p.r)
    y1 = min(h, ys.max() + p.r + 1)
    x0 = max(0, xs.min() - p.r)
    x1 = min(w, xs.max() + p.r + 1)
    vals = depth.values[y0:y1, x0:x1].astype(np.float32)
    valid = depth.valid[y0:y1, x0:x1]
    g = guide.values[y0:y1, x0:x1].astype(np.float32)

    r = p.r
    pad_v = np.pad(vals, r).astype(np.float32)
    pad_m = np.pad(valid, r)
    pad_g = np.pad(g, ((r, r), (r, r), (0, 0))).astype(np.float32)
    inv_2ss = np.float32(1.0 / (2.0 * p.sigma_s * p.sigma_s))
    neg_inv_2sr = np.float32(-1.0 / (2.0 * p.sigma_r * p.sigma_r))

    def band(rows: slice) -> tuple[np.ndarray, np.ndarray]:
        bh = rows.stop - rows.start
        bw = vals.shape[1]
        num = np.zeros((bh, bw), dtype=np.float32)
        den = np.zeros((bh, bw), dtype=np.float32)
        g0 = pad_g[rows.start + r : rows.stop + r, r : r + bw]
        for dy, dx in _window_offsets(r):
            ys = slice(rows.start + r + dy, rows.stop + r + dy)
            xs = slice(r + dx, r + dx + bw)
            gn = pad_g[ys, xs]
            d0 = gn[..., 0] - g0[..., 0]
            arg = d0 * d0
            d1 = gn[..., 1] - g0[..., 1]
            arg += d1 * d1
            d2 = gn[..., 2] - g0[..., 2]
            arg += d2 * d2
            arg *= neg_inv_2sr
            arg -= np.float32(dy * dy + dx * dx) * inv_2ss
            wgt = np.exp(arg, out=arg)
            wgt *= pad_m[ys, xs]
            num += wgt * pad_v[ys, xs]
            den += wgt
        return num, den

    n_rows = vals.shape[0]
    threads = max(1, min(threads, n_rows))
    bands = [slice(i * n_rows // threads, (i + 1) * n_rows // threads) for i in range(threads)]
    bands = [b for b in bands if b.stop > b.start]
    if len(bands) == 1:
        results = [band(bands[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            results = list(pool.map(band, bands))
    num = np.concatenate([r[0] for r in results], axis=0)
    den = np.concatenate([r[1] for r in results], axis=0)
    box_valid = den > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        box_vals = np.where(box_valid, num / np.where(box_valid, den, np.float32(1.0)), np.float32(0.0))
    out_vals[y0:y1, x0:x1] = box_vals.astype(np.float64)
    out_valid[y0:y1, x0:x1] = box_valid
    return DepthMap(np.where(out_valid, out_vals, 0.0), out_valid)
