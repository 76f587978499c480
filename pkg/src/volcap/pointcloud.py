"""Per-camera colored point clouds: back-projection, radius outlier
filtering with a KD-tree, and covariance-based normal estimation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera, camera_to_world
from .depthfilter import DepthMap, GuidanceImage
from .errors import InvalidInputError


@dataclass(frozen=True)
class PointCloud:
    """World-space positions (m), colors in [0, 1], optional unit normals.

    Points without a normal estimate carry NaN rows in ``normals``.
    """

    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None
    source_camera: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if pos.shape[0] != col.shape[0]:
            raise InvalidInputError("positions and colors must have the same length")
        if not np.all(np.isfinite(pos)):
            raise InvalidInputError("positions must be finite")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape[0] != pos.shape[0]:
                raise InvalidInputError("normals must match positions in length")
            has = ~np.any(np.isnan(nrm), axis=1)
            lengths = np.linalg.norm(nrm[has], axis=1)
            if has.any() and np.max(np.abs(lengths - 1.0)) > 1e-6:
                raise InvalidInputError("present normals must be unit length within 1e-6")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class RadiusFilterParams:
    """Keep a point only if >= n_min points (itself included) lie within r."""

    r: float = 0.2
    n_min: int = 30

    def __post_init__(self):
        if self.r <= 0:
            raise InvalidInputError("radius must be positive")
        if self.n_min < 1:
            raise InvalidInputError("n_min must be >= 1")


def reconstruct_pointcloud(
    depth: DepthMap, color: GuidanceImage, mask: np.ndarray, cam: Camera
) -> PointCloud:
    """Back-project every valid foreground depth pixel to a colored world point.

    Points are emitted in row-major pixel order.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.values.shape or color.values.shape[:2] != depth.values.shape:
        raise InvalidInputError("depth, color, and mask must share dimensions")
    vs, us = np.nonzero(depth.valid & mask)
    if vs.size == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), source_camera=cam.id)
    d = depth.values[vs, us]
    K = cam.intrinsics
    pts_cam = np.stack([(us - K.c_x) / K.f_x * d, (vs - K.c_y) / K.f_y * d, d], axis=1)
    pts_world = camera_to_world(pts_cam, cam.pose)
    return PointCloud(pts_world, color.values[vs, us], source_camera=cam.id)


def radius_outlier_filter(cloud: PointCloud, p: RadiusFilterParams | None = None) -> PointCloud:
    """Remove isolated points by the radius validity test.

    A point survives iff strictly fewer than r away it sees at least n_min
    points, counting itself.  Candidate neighbors come from a KD-tree ball
    query; the strict-inequality count matches an O(N^2) brute force
    exactly.  Input order is preserved.
    """
    p = p or RadiusFilterParams()
    n = len(cloud)
    if n == 0:
        return cloud
    pos = cloud.positions
    tree = cKDTree(pos)
    # Candidate pairs from a closed-ball query with a hair of slack, then a
    # strict recount on squared distances, so the kept set is exactly
    # {q : ||q - p|| < r} with >= n_min members, matching brute force bit
    # for bit.  Each point counts itself.
    pairs = tree.query_pairs(p.r * (1.0 + 1e-12), output_type="ndarray")
    counts = np.ones(n, dtype=np.int64)
    if len(pairs):
        diff = pos[pairs[:, 0]] - pos[pairs[:, 1]]
        d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2 + diff[:, 2] ** 2
        within = pairs[d2 < p.r * p.r]
        counts += np.bincount(within[:, 0], minlength=n)
        counts += np.bincount(within[:, 1], minlength=n)
    keep = counts >= p.n_min
    return PointCloud(
        pos[keep],
        cloud.colors[keep],
        cloud.normals[keep] if cloud.normals is not None else None,
        cloud.source_camera,
    )


def estimate_normals(
    cloud: PointCloud,
    radius: float = 0.1,
    max_nn: int = 30,
    viewpoint=(0.0, 0.0, 0.0),
) -> PointCloud:
    """Per-point normals from local covariance analysis.

    For each point, up to ``max_nn`` nearest neighbors within ``radius``
    (the point itself included) define a covariance matrix; the eigenvector
    of its smallest eigenvalue gives the normal, oriented so that
    (viewpoint - p) . n >= 0.  Points with fewer than 3 neighbors, or a
    neighborhood of rank < 2, get no normal (NaN row).
    """
    n = len(cloud)
    if n == 0:
        raise InvalidInputError("cannot estimate normals of an empty cloud")
    viewpoint = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    pos = cloud.positions
    tree = cKDTree(pos)
    k = min(max_nn, n)
    dists, idxs = tree.query(pos, k=k, distance_upper_bound=radius)
    if k == 1:
        dists = dists[:, None]
        idxs = idxs[:, None]
    normals = np.full((n, 3), np.nan)
    for i in range(n):
        nb = idxs[i][np.isfinite(dists[i])]
        if nb.size < 3:
            continue
        pts = pos[nb]
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered / nb.size
        evals, evecs = np.linalg.eigh(cov)
        # eigh returns ascending eigenvalues; rank < 2 means the two larger
        # ones do not both clear zero, leaving the minor axis undefined.
        if evals[1] <= 1e-18:
            continue
        normal = evecs[:, 0]
        if np.dot(viewpoint - pos[i], normal) < 0:
            normal = -normal
        normals[i] = normal / np.linalg.norm(normal)
    return PointCloud(pos, cloud.colors, normals, cloud.source_camera)
