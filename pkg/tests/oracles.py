"""Independent reference implementations used to verify the library.

Everything here is deliberately written along a different computational
path than the package: per-pixel double loops instead of shifted-array
accumulation, brute force instead of KD-trees, Monte Carlo instead of grid
sampling, de Casteljau instead of the polynomial form.  Oracles must stay
independent of the code they check.
"""

from __future__ import annotations

import numpy as np


def quantile_sorted(values: np.ndarray, q: float) -> float:
    """Linear-interpolation quantile computed from an explicit sort."""
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 1:
        return float(v[0])
    h = q * (len(v) - 1)
    lo = int(np.floor(h))
    hi = min(lo + 1, len(v) - 1)
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def bilateral_spatial_loop(
    vals: np.ndarray,
    valid: np.ndarray,
    guide: np.ndarray,
    r: int,
    sigma_s: float,
    sigma_r: float,
):
    """Direct double-loop evaluation of the guided bilateral filter."""
    h, w = vals.shape
    out = np.zeros((h, w))
    out_valid = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - r), min(h, y + r + 1)
            x0, x1 = max(0, x - r), min(w, x + r + 1)
            vv = vals[y0:y1, x0:x1]
            mm = valid[y0:y1, x0:x1]
            gg = guide[y0:y1, x0:x1]
            ys, xs = np.mgrid[y0:y1, x0:x1]
            spatial = np.exp(-((ys - y) ** 2 + (xs - x) ** 2) / (2.0 * sigma_s**2))
            cdiff = np.sum((gg - guide[y, x]) ** 2, axis=2)
            rng_w = np.exp(-cdiff / (2.0 * sigma_r**2))
            wgt = np.where(mm, spatial * rng_w, 0.0)
            den = wgt.sum()
            if den > 0:
                out[y, x] = (wgt * vv).sum() / den
                out_valid[y, x] = True
    return out, out_valid


def warp_bilinear_loop(vals: np.ndarray, valid: np.ndarray | None, flow: np.ndarray):
    """Per-pixel bilinear warp: sample source at x + flow(x).

    With ``valid`` given (depth semantics), a target pixel is invalid when
    any nonzero-weight tap is invalid or out of bounds.  Without it
    (image semantics), taps are clamped to the border.
    """
    h, w = vals.shape[:2]
    out = np.zeros_like(vals, dtype=float)
    out_valid = np.ones((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            sx = x + flow[y, x, 0]
            sy = y + flow[y, x, 1]
            if valid is None:
                sx = min(max(sx, 0.0), w - 1.0)
                sy = min(max(sy, 0.0), h - 1.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            fx, fy = sx - x0, sy - y0
            acc = 0.0
            ok = True
            for ty, wy in ((y0, 1 - fy), (y0 + 1, fy)):
                for tx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                    wgt = wx * wy
                    if wgt <= 0:
                        continue
                    if not (0 <= tx < w and 0 <= ty < h):
                        ok = False
                        continue
                    if valid is not None and not valid[ty, tx]:
                        ok = False
                        continue
                    acc = acc + wgt * vals[min(max(ty, 0), h - 1), min(max(tx, 0), w - 1)]
            out[y, x] = acc if ok else 0.0
            out_valid[y, x] = ok
    return out, out_valid


def bilateral_spatiotemporal_loop(
    vals,
    valid,
    guide,
    prev_vals,
    prev_valid,
    prev_guide,
    flow,
    r,
    sigma_s,
    sigma_r,
    sigma_t,
    lambda_t,
):
    """Double-loop BS+T: spatial term plus a flow-warped temporal term."""
    h, w = vals.shape
    d_warp, d_warp_ok = warp_bilinear_loop(prev_vals, prev_valid, flow)
    d_warp_ok &= d_warp > 0
    i_warp, _ = warp_bilinear_loop(prev_guide, None, flow)
    out = np.zeros((h, w))
    out_valid = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            y0, y1 = max(0, y - r), min(h, y + r + 1)
            x0, x1 = max(0, x - r), min(w, x + r + 1)
            vv = vals[y0:y1, x0:x1]
            mm = valid[y0:y1, x0:x1]
            gg = guide[y0:y1, x0:x1]
            ys, xs = np.mgrid[y0:y1, x0:x1]
            spatial = np.exp(-((ys - y) ** 2 + (xs - x) ** 2) / (2.0 * sigma_s**2))
            cdiff = np.sum((gg - guide[y, x]) ** 2, axis=2)
            rng_w = np.exp(-cdiff / (2.0 * sigma_r**2))
            wgt = np.where(mm, spatial * rng_w, 0.0)
            num = (wgt * vv).sum()
            den = wgt.sum()
            if lambda_t > 0 and d_warp_ok[y, x]:
                tdiff = np.sum((i_warp[y, x] - guide[y, x]) ** 2)
                wt = lambda_t * np.exp(-tdiff / (2.0 * sigma_t**2))
                num += wt * d_warp[y, x]
                den += wt
            if den > 0:
                out[y, x] = num / den
                out_valid[y, x] = True
    return out, out_valid


def radius_filter_brute(positions: np.ndarray, r: float, n_min: int) -> np.ndarray:
    """O(N^2) keep mask for the radius validity test (strict inequality).

    All pairwise squared distances against r^2, no spatial structure.
    """
    from scipy.spatial.distance import cdist

    n = len(positions)
    keep = np.zeros(n, dtype=bool)
    block = 1024
    r2 = r * r
    for i0 in range(0, n, block):
        d2 = cdist(positions[i0 : i0 + block], positions, "sqeuclidean")
        keep[i0 : i0 + block] = (d2 < r2).sum(axis=1) >= n_min
    return keep


def pair_overlap_monte_carlo(cam_a, cam_b, near, far, n_samples, seed) -> float:
    """Randomized visibility fraction used to cross-check the grid version."""
    rng = np.random.default_rng(seed)
    Ka = cam_a.intrinsics
    us = rng.uniform(0.0, Ka.width - 1.0, n_samples)
    vs = rng.uniform(0.0, Ka.height - 1.0, n_samples)
    ds = rng.uniform(near, far, n_samples)
    pts_cam = np.stack([(us - Ka.c_x) / Ka.f_x * ds, (vs - Ka.c_y) / Ka.f_y * ds, ds], axis=1)
    pts_world = pts_cam @ cam_a.pose.R.T + cam_a.pose.t
    pc = (pts_world - cam_b.pose.t) @ cam_b.pose.R
    Kb = cam_b.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = Kb.f_x * pc[:, 0] / pc[:, 2] + Kb.c_x
        v = Kb.f_y * pc[:, 1] / pc[:, 2] + Kb.c_y
    vis = (pc[:, 2] > 0) & (u >= 0) & (u <= Kb.width - 1) & (v >= 0) & (v <= Kb.height - 1)
    return float(np.mean(vis))


def erosion_removed_brute(mask: np.ndarray, erode_px: int) -> np.ndarray:
    """Foreground pixels within erode_px (Euclidean) of background.

    The image border counts as background, matching binary erosion with a
    Euclidean disk structuring element.
    """
    h, w = mask.shape
    padded = np.pad(mask, 1, constant_values=False)
    bg = np.array(np.nonzero(~padded)).T  # (k, 2) in padded coords
    removed = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            d = np.sqrt(((bg - np.array([y + 1, x + 1])) ** 2).sum(axis=1))
            removed[y, x] = d.min() <= erode_px
    return removed


def de_casteljau(t: float, pts: np.ndarray) -> np.ndarray:
    """Recursive-lerp evaluation of a Bezier curve."""
    pts = np.asarray(pts, dtype=float).copy()
    while len(pts) > 1:
        pts = (1.0 - t) * pts[:-1] + t * pts[1:]
    return pts[0]


def directional_fd(f, x: np.ndarray, direction: np.ndarray, h: float = 1e-6) -> float:
    """Central finite difference of a scalar function along a direction."""
    return (f(x + h * direction) - f(x - h * direction)) / (2.0 * h)
