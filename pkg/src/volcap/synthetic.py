"""Synthetic capture sessions for tests, benchmarks, and demos.

Builds an arc rig of pinhole cameras around a procedurally textured sphere
(a stand-in performer), renders analytic depth/color/mask frames with
controllable sensor noise, and writes a session directory with a manifest
that the pipeline can run end to end.  All randomness is seeded per
(session, camera, frame), so generated sessions are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, Intrinsics, Pose, look_at, save_rig
from .depthfilter import DepthMap, GuidanceImage
from .imageio import write_color_png, write_depth_png, write_flo, write_mask_png

FRAME_INTERVAL_US = 33333  # 30 FPS


def make_arc_rig(
    n_cameras: int = 6,
    radius: float = 2.5,
    baseline: float = 0.9,
    width: int = 80,
    height: int = 64,
    focal: float | None = None,
    rig_height: float = 0.0,
) -> list[Camera]:
    """Cameras along a circular arc facing the origin.

    Adjacent cameras are ``baseline`` meters apart along the chord, matching
    a compact multi-camera stage layout.
    """
    if focal is None:
        focal = 1.2 * width
    step = 2.0 * np.arcsin(min(baseline / (2.0 * radius), 1.0))
    start = -step * (n_cameras - 1) / 2.0
    cams = []
    for i in range(n_cameras):
        ang = start + i * step
        eye = np.array([radius * np.sin(ang), rig_height, -radius * np.cos(ang)])
        pose = look_at(eye, (0.0, 0.0, 0.0))
        intr = Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
        cams.append(Camera(f"cam{i:02d}", intr, pose))
    return cams


def make_parallel_rig(
    n_cameras: int = 6,
    baseline: float = 0.25,
    distance: float = 2.5,
    width: int = 64,
    height: int = 52,
    focal: float | None = None,
) -> list[Camera]:
    """Side-by-side cameras with identical orientation facing +z.

    Adjacent pairs are rectified by construction (pure horizontal baseline,
    shared image rows), which is the input contract of the stereo stage.
    """
    if focal is None:
        focal = 1.2 * width
    cams = []
    start = -baseline * (n_cameras - 1) / 2.0
    for i in range(n_cameras):
        eye = np.array([start + i * baseline, 0.0, -distance])
        pose = Pose(np.eye(3), eye)
        intr = Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
        cams.append(Camera(f"cam{i:02d}", intr, pose))
    return cams


def _surface_color(points: np.ndarray) -> np.ndarray:
    """Smooth procedural texture from world coordinates, channels in [0, 1]."""
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    r = 0.5 + 0.45 * np.sin(9.0 * x + 3.0 * y)
    g = 0.5 + 0.45 * np.sin(7.0 * y - 2.0 * z + 1.0)
    b = 0.5 + 0.45 * np.sin(8.0 * z + 5.0 * x + 2.0)
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def render_sphere_view(
    cam: Camera, center=(0.0, 0.0, 0.0), sphere_radius: float = 0.6
) -> tuple[DepthMap, GuidanceImage, np.ndarray]:
    """Analytic ray-cast of a textured sphere: (depth, color, mask).

    Depth is the camera-space z of the first intersection, matching the
    back-projection convention.  Background pixels carry a mid-gray color.
    """
    K = cam.intrinsics
    us, vs = np.meshgrid(np.arange(K.width), np.arange(K.height))
    dirs = np.stack([(us - K.c_x) / K.f_x, (vs - K.c_y) / K.f_y, np.ones_like(us, dtype=float)], axis=-1)
    dirs_w = dirs @ cam.pose.R.T
    oc = cam.pose.t - np.asarray(center, dtype=float)
    a = np.sum(dirs_w * dirs_w, axis=-1)
    b = 2.0 * np.sum(dirs_w * oc, axis=-1)
    c = float(oc @ oc) - sphere_radius**2
    disc = b * b - 4.0 * a * c
    hit = disc > 0
    s = np.zeros_like(a)
    s[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
    hit &= s > 0
    depth = np.where(hit, s, 0.0)
    pts = cam.pose.t + dirs_w * s[..., None]
    color = np.where(hit[..., None], _surface_color(pts), 0.5)
    return DepthMap(depth, hit), GuidanceImage(color), hit


def corrupt_depth(
    depth: DepthMap,
    rng: np.random.Generator,
    noise_sigma_m: float = 0.005,
    outlier_fraction: float = 0.002,
    hole_fraction: float = 0.01,
    outlier_depth_m: float = 9.0,
) -> DepthMap:
    """Sensor-style degradation: speckle noise, far outliers, and holes."""
    vals = depth.values.copy()
    valid = depth.valid.copy()
    idx = np.nonzero(valid)
    n = idx[0].size
    if n == 0:
        return depth
    vals[idx] += rng.normal(0.0, noise_sigma_m, n)
    vals = np.maximum(vals, 1e-3)
    n_out = int(round(outlier_fraction * n))
    if n_out:
        pick = rng.choice(n, n_out, replace=False)
        vals[idx[0][pick], idx[1][pick]] = outlier_depth_m
    n_hole = int(round(hole_fraction * n))
    if n_hole:
        pick = rng.choice(n, n_hole, replace=False)
        valid[idx[0][pick], idx[1][pick]] = False
    return DepthMap(np.where(valid, vals, 0.0), valid)


@dataclass(frozen=True)
class SessionSpec:
    """Knobs for the synthetic session generator."""

    n_cameras: int = 6
    n_frames: int = 100
    width: int = 80
    height: int = 64
    mode: str = "offline"
    rgb_only: bool = False
    with_flow: bool = True
    seed: int = 7
    jitter_us: int = 0
    drift_us_camera: int | None = None  # camera index receiving the offset
    drift_us: int = 0
    imu_spike_camera: int | None = None
    imu_spike_ang: float = 0.0
    sphere_radius: float = 0.6
    noise_sigma_m: float = 0.005


def generate_session(root, spec: SessionSpec = SessionSpec()) -> Path:
    """Write a full synthetic session directory; returns the manifest path.

    Layout: rig.txt, manifest.json, and per-camera frame files under
    ``<cam>/{depth,color,mask,flow}/<frame>.{png,flo}``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if spec.rgb_only:
        # Stereo consumes rectified pairs; the parallel rig is rectified by
        # construction.
        rig = make_parallel_rig(spec.n_cameras, width=spec.width, height=spec.height)
    else:
        rig = make_arc_rig(spec.n_cameras, width=spec.width, height=spec.height)
    save_rig(root / "rig.txt", rig)
    manifest = {
        "mode": spec.mode,
        "rig": "rig.txt",
        "fps": 30.0,
        "rgb_only": spec.rgb_only,
        "cameras": [],
    }
    for ci, cam in enumerate(rig):
        cam_dir = root / cam.id
        for sub in ("depth", "color", "mask", "flow"):
            if sub == "depth" and spec.rgb_only:
                continue
            if sub == "flow" and (spec.rgb_only or not spec.with_flow):
                continue
            (cam_dir / sub).mkdir(parents=True, exist_ok=True)
        clean_depth, color, mask = render_sphere_view(cam, sphere_radius=spec.sphere_radius)
        frames = []
        drift = spec.drift_us if spec.drift_us_camera == ci else 0
        for k in range(spec.n_frames):
            rng = np.random.default_rng([spec.seed, ci, k])
            t_us = k * FRAME_INTERVAL_US + drift
            if spec.jitter_us:
                t_us += int(rng.integers(-spec.jitter_us, spec.jitter_us + 1))
            rec = {"t_us": int(t_us)}
            color_path = f"{cam.id}/color/{k:05d}.png"
            mask_path = f"{cam.id}/mask/{k:05d}.png"
            write_color_png(root / color_path, color.values)
            write_mask_png(root / mask_path, mask)
            rec["color"] = color_path
            rec["mask"] = mask_path
            if not spec.rgb_only:
                noisy = corrupt_depth(clean_depth, rng, noise_sigma_m=spec.noise_sigma_m)
                depth_path = f"{cam.id}/depth/{k:05d}.png"
                write_depth_png(root / depth_path, noisy.values, noisy.valid)
                rec["depth"] = depth_path
                if spec.with_flow:
                    flow_path = f"{cam.id}/flow/{k:05d}.flo"
                    write_flo(root / flow_path, np.zeros((spec.height, spec.width, 2), dtype=np.float32))
                    rec["flow"] = flow_path
            frames.append(rec)
        imu = []
        for si in range(10):
            ang = [0.0, 0.0, 0.0]
            lin = [0.0, 0.0, 0.0]
            if spec.imu_spike_camera == ci and si == 5 and spec.imu_spike_ang > 0:
                ang = [spec.imu_spike_ang, 0.0, 0.0]
            imu.append({"t_us": si * 100000, "angular": ang, "linear": lin})
        manifest["cameras"].append({"id": cam.id, "frames": frames, "imu": imu})
    manifest_path = root / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest_path
