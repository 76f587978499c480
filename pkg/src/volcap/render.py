"""Software rendering: Gaussian-splat rasterization, fixed-size point
rendering with a depth-buffer median pass, the cubic Bezier viewer path,
and the source-camera selection policy.

Splats project to screen-space ellipses with covariance

    Lambda = J R_v Sigma R_v^T J^T + footprint_term * I_2

where R_v is the world-to-camera rotation and J the perspective Jacobian
at the camera-space mean.  The additive footprint term anti-aliases
sub-pixel splats; eigenvalues are additionally floored at min_footprint.
Splats are composited in approximate front-to-back order (sorted by center
depth, ties by input index) with pre-multiplied alphas:

    alpha_i(x) = opacity_i * exp(-0.5 * d^T Lambda^-1 d)
    C += T * alpha_i * c_i;  T *= (1 - alpha_i)

stopping per pixel once T drops below transmittance_eps.  Evaluation is
restricted to the cutoff_sigma bounding box of each ellipse.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .camera import Camera, Pose, projection_jacobian, world_to_camera
from .errors import InvalidInputError
from .pointcloud import PointCloud
from .splats import SplatFrame, assemble_covariance


@dataclass(frozen=True)
class RenderSettings:
    width: int
    height: int
    footprint_term: float = 0.3
    min_footprint: float = 0.3
    cutoff_sigma: float = 3.0
    transmittance_eps: float = 1e-4
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("render target must be at least 1x1")
        if self.footprint_term < 0 or self.cutoff_sigma <= 0:
            raise InvalidInputError("footprint_term must be >= 0 and cutoff_sigma > 0")


@dataclass(frozen=True)
class ScreenSplat:
    """A projected splat: pixel center, 2x2 screen covariance, depth, color."""

    center: np.ndarray
    lam: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass(frozen=True)
class BezierPath:
    """Cubic Bezier control points, 4 x 3 meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(4, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("Bezier control points must be finite")
        object.__setattr__(self, "points", pts)


def _floor_eigenvalues(lam: np.ndarray, floor: float) -> np.ndarray:
    """Clamp the eigenvalues of a symmetric 2x2 matrix up to ``floor``."""
    a, b, c = lam[0, 0], lam[0, 1], lam[1, 1]
    half_tr = 0.5 * (a + c)
    disc = np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    lo = half_tr - disc
    if lo >= floor:
        return lam
    hi = max(half_tr + disc, floor)
    lo = floor
    if disc < 1e-30:
        return np.array([[lo, 0.0], [0.0, lo]])
    # Eigenvector for the larger eigenvalue.
    if abs(b) > 1e-30:
        v = np.array([b, (half_tr + disc) - a])
    elif a >= c:
        v = np.array([1.0, 0.0])
    else:
        v = np.array([0.0, 1.0])
    v = v / np.linalg.norm(v)
    w = np.array([-v[1], v[0]])
    return hi * np.outer(v, v) + lo * np.outer(w, w)


def project_covariance(
    mu: np.ndarray,
    cov_world: np.ndarray,
    color: np.ndarray,
    opacity: float,
    cam: Camera,
    settings: RenderSettings,
) -> ScreenSplat | None:
    """Project a world-space Gaussian to its screen footprint.

    Returns None (culled) for means at or behind the camera plane.
    """
    p_cam = world_to_camera(np.asarray(mu, dtype=np.float64), cam.pose)
    if p_cam[2] <= 0:
        return None
    K = cam.intrinsics
    J = projection_jacobian(p_cam, K)
    Rv = cam.pose.R.T  # world -> camera
    lam = J @ (Rv @ np.asarray(cov_world, dtype=np.float64) @ Rv.T) @ J.T
    lam = lam + settings.footprint_term * np.eye(2)
    lam = _floor_eigenvalues(lam, settings.min_footprint)
    center = np.array([K.f_x * p_cam[0] / p_cam[2] + K.c_x, K.f_y * p_cam[1] / p_cam[2] + K.c_y])
    return ScreenSplat(center, lam, float(p_cam[2]), np.asarray(color, dtype=np.float64), float(opacity))


def project_splat(splat, cam: Camera, settings: RenderSettings) -> ScreenSplat | None:
    """Project a GaussianSplat (rotation + scales form) to screen space."""
    cov = assemble_covariance(splat.rot, splat.scales)
    return project_covariance(splat.mu, cov, splat.color, splat.opacity, cam, settings)


def rasterize_screen_splats(splats: list[ScreenSplat], settings: RenderSettings) -> np.ndarray:
    """Front-to-back composite of already-projected splats.

    Input must already be depth-sorted; ties keep list order.  Returns an
    H x W x 4 float image (RGB over background, alpha = 1 - transmittance).
    """
    h, w = settings.height, settings.width
    C = np.zeros((h, w, 3))
    T = np.ones((h, w))
    cutoff = settings.cutoff_sigma
    eps = settings.transmittance_eps
    for s in splats:
        det = s.lam[0, 0] * s.lam[1, 1] - s.lam[0, 1] ** 2
        if det <= 0:
            continue
        inv00 = s.lam[1, 1] / det
        inv01 = -s.lam[0, 1] / det
        inv11 = s.lam[0, 0] / det
        hx = cutoff * np.sqrt(s.lam[0, 0])
        hy = cutoff * np.sqrt(s.lam[1, 1])
        x0 = max(0, int(np.ceil(s.center[0] - hx)))
        x1 = min(w - 1, int(np.floor(s.center[0] + hx)))
        y0 = max(0, int(np.ceil(s.center[1] - hy)))
        y1 = min(h - 1, int(np.floor(s.center[1] + hy)))
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1) - s.center[0]
        dy = np.arange(y0, y1 + 1) - s.center[1]
        DX, DY = np.meshgrid(dx, dy)
        m = inv00 * DX * DX + 2.0 * inv01 * DX * DY + inv11 * DY * DY
        alpha = s.opacity * np.exp(-0.5 * m)
        t_local = T[y0 : y1 + 1, x0 : x1 + 1]
        live = t_local >= eps
        contrib = np.where(live, t_local * alpha, 0.0)
        C[y0 : y1 + 1, x0 : x1 + 1] += contrib[..., None] * s.color
        T[y0 : y1 + 1, x0 : x1 + 1] = np.where(live, t_local * (1.0 - alpha), t_local)
    bg = np.asarray(settings.background, dtype=np.float64)
    rgb = C + T[..., None] * bg
    return np.concatenate([rgb, (1.0 - T)[..., None]], axis=2)


def rasterize_splats(frame: SplatFrame, cam: Camera, settings: RenderSettings) -> np.ndarray:
    """Rasterize a splat frame: project, depth-sort, composite.

    Behind-camera splats are culled.  Returns an H x W x 4 float image.
    """
    projected = []
    for i in range(len(frame)):
        s = project_covariance(
            frame.mu[i],
            assemble_covariance(frame.rot[i], frame.scales[i]),
            frame.color[i],
            float(frame.opacity[i]),
            cam,
            settings,
        )
        if s is not None:
            projected.append(s)
    order = np.argsort([s.depth for s in projected], kind="stable")
    return rasterize_screen_splats([projected[i] for i in order], settings)


def render_pointcloud(
    cloud: PointCloud,
    cam: Camera,
    point_size: int = 2,
    settings: RenderSettings | None = None,
    return_depth: bool = False,
):
    """Z-buffered fixed-size point rendering with a 3x3 depth-median pass.

    Each visible point covers a point_size x point_size pixel square.  The
    depth buffer is median-filtered before the color resolve, which fills
    speckle holes with the neighbor whose depth best matches the median.
    Returns an H x W x 3 float image (plus the resolved depth buffer when
    requested; holes carry +inf).
    """
    settings = settings or RenderSettings(cam.intrinsics.width, cam.intrinsics.height)
    h, w = settings.height, settings.width
    depth_buf = np.full((h, w), np.inf)
    idx_buf = np.full((h, w), -1, dtype=np.int64)
    n = len(cloud)
    if n and point_size >= 1:
        from .camera import project_points

        u, v, z = project_points(cloud.positions, cam)
        front = z > 0
        pts = np.nonzero(front)[0]
        if pts.size:
            anchor = (point_size - 1) / 2.0
            px0 = np.floor(u[pts] - anchor + 0.5).astype(np.int64)
            py0 = np.floor(v[pts] - anchor + 0.5).astype(np.int64)
            oy, ox = np.meshgrid(np.arange(point_size), np.arange(point_size), indexing="ij")
            cols = (px0[:, None, None] + ox[None]).reshape(-1)
            rows = (py0[:, None, None] + oy[None]).reshape(-1)
            pis = np.repeat(pts, point_size * point_size)
            inb = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
            cols, rows, pis = cols[inb], rows[inb], pis[inb]
            flat = rows * w + cols
            zs = z[pis]
            # Nearest depth wins; equal depths keep the earlier point.
            order = np.lexsort((pis, zs, flat))
            flat, zs, pis = flat[order], zs[order], pis[order]
            first = np.unique(flat, return_index=True)[1]
            depth_buf.reshape(-1)[flat[first]] = zs[first]
            idx_buf.reshape(-1)[flat[first]] = pis[first]

    # 3x3 median over the depth buffer (image border padded with +inf).  The
    # median fills splat-quantization holes and replaces depths far behind
    # their neighborhood (background showing through speckle); pixels whose
    # own sample is consistent keep it, so isolated splats survive.
    padded = np.pad(depth_buf, 1, constant_values=np.inf)
    stack = np.stack(
        [padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    )
    med = np.sort(stack, axis=0)[4]
    own_ok = np.isfinite(depth_buf) & ~(np.isfinite(med) & (depth_buf > med * 1.02))
    use_med = ~own_ok & np.isfinite(med)

    pad_idx = np.pad(idx_buf, 1, constant_values=-1)
    idx_stack = np.stack(
        [pad_idx[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    )
    with np.errstate(invalid="ignore"):
        diffs = np.abs(stack - med[None])
    diffs = np.where(np.isnan(diffs), np.inf, diffs)
    pick = np.argmin(diffs, axis=0)
    nearest_idx = np.take_along_axis(idx_stack, pick[None], axis=0)[0]

    chosen = np.where(own_ok, idx_buf, np.where(use_med & (nearest_idx >= 0), nearest_idx, -1))
    out_depth = np.where(own_ok, depth_buf, np.where(use_med, med, np.inf))
    filled = chosen >= 0

    bg = np.asarray(settings.background, dtype=np.float64)
    rgb = np.broadcast_to(bg, (h, w, 3)).copy()
    rgb[filled] = cloud.colors[chosen[filled]]
    if return_depth:
        return rgb, np.where(filled, out_depth, np.inf)
    return rgb


def bezier_point(t: float, path: BezierPath) -> np.ndarray:
    """Cubic Bezier point; t outside [0, 1] is clamped with a warning."""
    if t < 0.0 or t > 1.0:
        warnings.warn(f"Bezier parameter {t} clamped to [0, 1]", RuntimeWarning)
        t = min(max(t, 0.0), 1.0)
    p0, p1, p2, p3 = path.points
    u = 1.0 - t
    return u**3 * p0 + 3.0 * u**2 * t * p1 + 3.0 * u * t**2 * p2 + t**3 * p3


def sample_bezier(path: BezierPath, n: int) -> np.ndarray:
    """n points at uniform parameter spacing (endpoints included)."""
    if n < 2:
        raise InvalidInputError("need at least 2 path samples")
    return np.stack([bezier_point(t, path) for t in np.linspace(0.0, 1.0, n)])


def load_path_file(path) -> BezierPath:
    """Read 12 whitespace-separated numbers (4 control points) from text."""
    with open(path, "r", encoding="utf-8") as f:
        tokens = []
        for line in f:
            tokens.extend(line.split("#", 1)[0].split())
    if len(tokens) != 12:
        raise InvalidInputError(f"path file must hold 12 numbers, found {len(tokens)}")
    return BezierPath(np.array([float(x) for x in tokens]).reshape(4, 3))


def select_source_camera(position: np.ndarray, rig: list[Camera]) -> Camera:
    """Physical camera nearest to the virtual position; ties by smaller id."""
    if not rig:
        raise InvalidInputError("rig must not be empty")
    position = np.asarray(position, dtype=np.float64).reshape(3)
    dists = np.array([np.linalg.norm(cam.pose.t - position) for cam in rig])
    best = dists.min()
    candidates = [cam for cam, d in zip(rig, dists) if d == best]
    return min(candidates, key=lambda c: c.id)


def plan_camera_selection(positions: np.ndarray, rig: list[Camera], mode: str = "sensor"):
    """Source selection along a sampled virtual path.

    sensor mode: per-sample nearest camera (ties by smaller id); returns a
    list of camera ids.  stereo mode: returns a list of adjacent-pair id
    tuples; within each run of samples sharing nearest camera k, the
    selection switches from pair (k-1, k) to (k, k+1) at the sample of
    minimal distance to camera k.  Adjacency follows rig list order.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not rig:
        raise InvalidInputError("rig must not be empty")
    if mode == "sensor":
        return [select_source_camera(p, rig).id for p in positions]
    if mode != "stereo":
        raise InvalidInputError(f"unknown selection mode {mode!r}")
    if len(rig) < 2:
        raise InvalidInputError("stereo selection needs at least 2 cameras")
    cam_pos = np.stack([cam.pose.t for cam in rig])
    d = np.linalg.norm(positions[:, None, :] - cam_pos[None, :, :], axis=2)
    nearest = np.argmin(d, axis=1)
    n_cams = len(rig)

    def pair_ids(i: int, j: int) -> tuple[str, str]:
        return (rig[i].id, rig[j].id)

    out = []
    start = 0
    while start < len(nearest):
        k = nearest[start]
        stop = start
        while stop < len(nearest) and nearest[stop] == k:
            stop += 1
        run = slice(start, stop)
        switch = start + int(np.argmin(d[run, k]))
        before = pair_ids(k - 1, k) if k >= 1 else pair_ids(k, k + 1)
        after = pair_ids(k, k + 1) if k <= n_cams - 2 else pair_ids(k - 1, k)
        for i in range(start, stop):
            out.append(before if i < switch else after)
        start = stop
    return out
