"""Pinhole camera models and coordinate transforms.

Conventions used throughout the toolkit:

- Camera axes follow the OpenCV convention: +X right, +Y down, +Z forward
  (the camera looks along +Z, points with camera-space z > 0 are visible).
- Pixel centers sit at integer coordinates: pixel (u, v) = (0, 0) is the
  center of the top-left sample.  No half-pixel offset is applied anywhere,
  which keeps project/backproject round trips exact.
- A pose stores the camera-to-world rotation ``R`` and the camera origin
  ``t`` in world coordinates, so ``p_world = R @ p_cam + t``.
- Rotations are stored as 3x3 matrices internally; unit quaternions
  (scalar-first, ``(w, x, y, z)``) appear only at codec boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidGeometryError, InvalidInputError, MalformedFileError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: focal lengths and principal point in pixels."""

    f_x: float
    f_y: float
    c_x: float
    c_y: float
    width: int
    height: int

    def __post_init__(self):
        if self.f_x <= 0 or self.f_y <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got ({self.f_x}, {self.f_y})")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError(f"image size must be >= 1, got ({self.width}, {self.height})")

    @property
    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.f_x, 0.0, self.c_x], [0.0, self.f_y, self.c_y], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: rotation ``R`` and origin ``t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise InvalidInputError("pose rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidInputError("pose rotation must have determinant +1 within 1e-9")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """Transform ``other`` by this pose (this after other).

        The product rotation is re-orthonormalized through SVD so that long
        chains of compositions stay orthonormal within 1e-9.
        """
        R = self.R @ other.R
        t = self.R @ other.t + self.t
        return Pose(orthonormalize(R), t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T.copy(), -(self.R.T @ self.t))


@dataclass(frozen=True)
class Camera:
    """A calibrated camera: unique id, intrinsics, and pose."""

    id: str
    intrinsics: Intrinsics
    pose: Pose


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD, with det fixed to +1."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def backproject_pixel(u: float, v: float, d: float, K: Intrinsics) -> np.ndarray:
    """Lift pixel (u, v) with metric depth d to a camera-space 3D point.

    Returns ``((u - c_x) / f_x * d, (v - c_y) / f_y * d, d)``.
    """
    if d <= 0:
        raise InvalidInputError(f"depth must be positive, got {d}")
    return np.array([(u - K.c_x) / K.f_x * d, (v - K.c_y) / K.f_y * d, d])


def camera_to_world(p: np.ndarray, pose: Pose) -> np.ndarray:
    """Map a camera-space point (or N x 3 stack) to world coordinates."""
    p = np.asarray(p, dtype=float)
    return p @ pose.R.T + pose.t


def world_to_camera(p: np.ndarray, pose: Pose) -> np.ndarray:
    """Map a world point (or N x 3 stack) into the camera frame."""
    p = np.asarray(p, dtype=float)
    return (p - pose.t) @ pose.R


def project_point(p_world: np.ndarray, cam: Camera) -> tuple[float, float, float]:
    """Project a world point, returning (u, v, depth).

    Raises InvalidGeometryError for points at or behind the camera plane.
    Inverse of ``camera_to_world(backproject_pixel(...))`` to within 1e-9.
    """
    x, y, z = world_to_camera(np.asarray(p_world, dtype=float).reshape(3), cam.pose)
    if z <= 0:
        raise InvalidGeometryError(f"point is behind the camera (z={z})")
    K = cam.intrinsics
    return (K.f_x * x / z + K.c_x, K.f_y * y / z + K.c_y, z)


def project_points(p_world: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of an N x 3 world-point array.

    Returns (u, v, z) arrays; callers must gate on z > 0 themselves.
    """
    pc = world_to_camera(np.asarray(p_world, dtype=float).reshape(-1, 3), cam.pose)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.intrinsics.f_x * pc[:, 0] / z + cam.intrinsics.c_x
        v = cam.intrinsics.f_y * pc[:, 1] / z + cam.intrinsics.c_y
    return u, v, z


def projection_jacobian(p_cam: np.ndarray, K: Intrinsics) -> np.ndarray:
    """2x3 Jacobian of the perspective projection at a camera-space point.

    J = [[f_x/z, 0, -f_x*x/z^2],
         [0, f_y/z, -f_y*y/z^2]]
    """
    x, y, z = np.asarray(p_cam, dtype=float).reshape(3)
    if z <= 0:
        raise InvalidGeometryError(f"Jacobian undefined for z <= 0 (z={z})")
    return np.array(
        [
            [K.f_x / z, 0.0, -K.f_x * x / (z * z)],
            [0.0, K.f_y / z, -K.f_y * y / (z * z)],
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a scalar-first quaternion (w, x, y, z).

    The quaternion is normalized first, so any nonzero 4-vector is accepted.
    """
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n == 0:
        raise InvalidInputError("zero quaternion has no rotation")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternion (w, x, y, z) for a rotation matrix.

    Sign convention: w >= 0 (antipodal quaternions encode the same rotation).
    """
    R = np.asarray(R, dtype=float).reshape(3, 3)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera pose at ``eye`` with +Z pointing toward ``target``.

    The default up vector is world -Y, matching the +Y-down camera axes.
    """
    eye = np.asarray(eye, dtype=float).reshape(3)
    fwd = np.asarray(target, dtype=float).reshape(3) - eye
    n = np.linalg.norm(fwd)
    if n == 0:
        raise InvalidInputError("look_at eye and target coincide")
    fwd = fwd / n
    upv = np.asarray(up, dtype=float)
    right = np.cross(-upv, fwd)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise InvalidInputError("up vector is parallel to the view direction")
    right = right / rn
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose(orthonormalize(R), eye)


# --- rig calibration files -------------------------------------------------
#
# One record per camera, whitespace separated (newlines allowed anywhere):
#   id  f_x f_y c_x c_y width height  r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz
# The 12 trailing numbers are the 3x4 camera-to-world pose [R | t], row major.
# '#' starts a comment that runs to the end of the line.

_RIG_RECORD_LEN = 19


def load_rig(path) -> list[Camera]:
    """Parse a rig calibration file into a camera list."""
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    tokens: list[str] = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if len(tokens) % _RIG_RECORD_LEN != 0:
        raise MalformedFileError(
            f"rig file {path}: token count {len(tokens)} is not a multiple of {_RIG_RECORD_LEN}"
        )
    cameras = []
    seen = set()
    for i in range(0, len(tokens), _RIG_RECORD_LEN):
        rec = tokens[i : i + _RIG_RECORD_LEN]
        cam_id = rec[0]
        if cam_id in seen:
            raise MalformedFileError(f"rig file {path}: duplicate camera id {cam_id!r}")
        seen.add(cam_id)
        try:
            nums = [float(x) for x in rec[1:]]
        except ValueError as e:
            raise MalformedFileError(f"rig file {path}: bad number in record {cam_id!r}: {e}") from e
        intr = Intrinsics(nums[0], nums[1], nums[2], nums[3], int(nums[4]), int(nums[5]))
        mat = np.array(nums[6:18]).reshape(3, 4)
        cameras.append(Camera(cam_id, intr, Pose(mat[:, :3], mat[:, 3])))
    return cameras


def save_rig(path, cameras: list[Camera]) -> None:
    """Write cameras in the rig calibration format read by load_rig."""
    lines = ["# id  fx fy cx cy w h  [R|t] camera-to-world, row major"]
    for cam in cameras:
        K = cam.intrinsics
        mat = np.hstack([cam.pose.R, cam.pose.t.reshape(3, 1)])
        nums = " ".join(f"{x:.17g}" for x in mat.ravel())
        lines.append(
            f"{cam.id} {K.f_x:.17g} {K.f_y:.17g} {K.c_x:.17g} {K.c_y:.17g} {K.width} {K.height} {nums}"
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
