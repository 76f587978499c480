"""Command-line surface for batch and scripted use.

Exit codes: 0 success, 2 validation error, 3 I/O or parse error, 4 session
gate rejection.  Errors print a single machine-parsable line to stderr:
``error: <category>: <message>``.  The default worker count for both pools
can be set through the VOLCAP_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .camera import Camera, Intrinsics, load_rig, look_at
from .codec import (
    decode_splat_frame,
    decode_video_splat,
    encode_splat_frame,
    encode_video_splat,
    read_ply_gaussian,
    read_ply_pointcloud,
    write_ply_gaussian,
)
from .depthfilter import (
    BilateralParams,
    DepthMap,
    FlowField,
    GuidanceImage,
    apply_mask,
    bilateral_spatial,
    bilateral_spatiotemporal,
)
from .errors import InvalidGeometryError, InvalidInputError, MalformedFileError, ValidationError, VolcapError
from .pipeline import (
    MotionGate,
    PipelineParams,
    SyncPolicy,
    build_task_graph,
    execute,
    gate_session,
    load_manifest,
    sync_frames,
)
from .pointcloud import RadiusFilterParams, estimate_normals, radius_outlier_filter, reconstruct_pointcloud
from .render import (
    RenderSettings,
    load_path_file,
    plan_camera_selection,
    rasterize_splats,
    render_pointcloud,
    sample_bezier,
)
from .splats import ScaleActivationParams
from .stereo import stereo_depth_for_pair

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_GATE = 4


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("VOLCAP_WORKERS", "2")))
    except ValueError:
        return 2


def _add_bilateral_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--radius", type=int, default=7, help="bilateral window radius in px (default 7)")
    p.add_argument("--sigma-s", type=float, default=7.0, help="spatial kernel sigma in px (default 7)")
    p.add_argument("--sigma-r", type=float, default=0.1, help="range kernel sigma, l2 RGB on 0-1 scale (default 0.1)")
    p.add_argument("--sigma-t", type=float, default=0.06, help="temporal kernel sigma (default 0.06)")
    p.add_argument("--lambda-t", type=float, default=0.6, help="temporal term weight (default 0.6)")
    p.add_argument("--spatial-only", action="store_true", help="force the purely spatial filter")


def _bilateral_from_args(args) -> BilateralParams:
    return BilateralParams(args.radius, args.sigma_s, args.sigma_r, args.sigma_t, args.lambda_t)


def _sorted_dir(path: Path, exts) -> list[Path]:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in exts)
    if not files:
        raise ValidationError(f"no matching files in {path}")
    return files


def cmd_filter_depth(args) -> int:
    params = _bilateral_from_args(args)
    depths = _sorted_dir(Path(args.depth_dir), {".png"})
    colors = _sorted_dir(Path(args.color_dir), {".png"})
    masks = _sorted_dir(Path(args.mask_dir), {".png"}) if args.mask_dir else None
    flows = _sorted_dir(Path(args.flow_dir), {".flo"}) if args.flow_dir else None
    if len(colors) != len(depths) or (masks and len(masks) != len(depths)):
        raise ValidationError("depth, color, and mask sequences must have equal length")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    prev_depth = prev_guide = None
    for k, dp in enumerate(depths):
        vals, valid = imageio.read_depth_png(dp)
        depth = DepthMap(vals, valid)
        guide = GuidanceImage(imageio.read_color_png(colors[k]))
        temporal = (
            not args.spatial_only and params.lambda_t > 0 and flows is not None and prev_depth is not None
        )
        if temporal:
            flow = FlowField(imageio.read_flo(flows[k]))
            filtered = bilateral_spatiotemporal(depth, guide, prev_depth, prev_guide, flow, params)
        else:
            filtered = bilateral_spatial(depth, guide, params)
        if masks:
            filtered = apply_mask(filtered, imageio.read_mask_png(masks[k]))
        prev_depth, prev_guide = filtered, guide
        imageio.write_depth_png(out_dir / dp.name, filtered.values, filtered.valid)
    print(f"filtered {len(depths)} frames -> {out_dir}")
    return EXIT_OK


def cmd_stereo_depth(args) -> int:
    first = GuidanceImage(imageio.read_color_png(args.first_color))
    second = GuidanceImage(imageio.read_color_png(args.second_color))
    m_first = imageio.read_mask_png(args.first_mask)
    m_second = imageio.read_mask_png(args.second_mask)
    wrote = 0
    for anchor, out_path in (("first", args.out_first), ("second", args.out_second)):
        if out_path is None:
            continue
        if anchor == "first":
            depth = stereo_depth_for_pair(
                first, second, m_first, m_second, args.focal, args.baseline,
                window=args.window, d_max=args.d_max,
            )
        else:
            depth = stereo_depth_for_pair(
                second, first, m_second, m_first, args.focal, args.baseline,
                window=args.window, d_max=args.d_max,
            )
        if depth is None:
            raise ValidationError("empty foreground in a mask; pair skipped")
        imageio.write_depth_png(out_path, depth.values, depth.valid)
        wrote += 1
    if wrote == 0:
        raise ValidationError("specify --out-first and/or --out-second")
    print(f"wrote {wrote} stereo depth map(s)")
    return EXIT_OK


def _find_camera(rig: list[Camera], cam_id: str) -> Camera:
    for cam in rig:
        if cam.id == cam_id:
            return cam
    raise ValidationError(f"camera {cam_id!r} not in rig")


def cmd_reconstruct(args) -> int:
    rig = load_rig(args.rig)
    cam = _find_camera(rig, args.camera)
    vals, valid = imageio.read_depth_png(args.depth)
    depth = DepthMap(vals, valid)
    color = GuidanceImage(imageio.read_color_png(args.color))
    mask = imageio.read_mask_png(args.mask)
    cloud = reconstruct_pointcloud(depth, color, mask, cam)
    cloud = radius_outlier_filter(cloud, RadiusFilterParams(args.filter_radius, args.n_min))
    if args.normals and len(cloud):
        cloud = estimate_normals(cloud, args.normals_radius, args.normals_max_nn, cam.pose.t)
    from .codec import write_ply_pointcloud
    from .pipeline import _splat_frame_for_cloud

    Path(args.out).write_bytes(write_ply_pointcloud(cloud))
    print(f"cloud: {len(cloud)} points -> {args.out}")
    if args.splat_out:
        params = PipelineParams(splat_opacity=args.splat_opacity)
        npz = Path(args.splat_inputs) if args.splat_inputs else None
        frame = _splat_frame_for_cloud(cloud, cam, params, npz, 0)
        Path(args.splat_out).write_bytes(encode_splat_frame(frame))
        print(f"splats: {len(frame)} -> {args.splat_out}")
    return EXIT_OK


def cmd_render(args) -> int:
    rig = load_rig(args.rig)
    path = load_path_file(args.path)
    positions = sample_bezier(path, args.frames)
    selections = plan_camera_selection(positions, rig, args.mode)
    base = rig[0].intrinsics
    width = args.width or base.width
    height = args.height or base.height
    intr = Intrinsics(
        base.f_x * width / base.width, base.f_y * height / base.height,
        (width - 1) / 2.0, (height - 1) / 2.0, width, height,
    )
    target = np.array([float(x) for x in args.target.split(",")])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = Path(args.artifacts)
    settings = RenderSettings(width, height, background=(0.1, 0.1, 0.1))
    for i, pos in enumerate(positions):
        vcam = Camera("virtual", intr, look_at(pos, target))
        sel = selections[i]
        if args.kind == "splats":
            sel_id = sel if isinstance(sel, str) else sel[0]
            vs = artifacts / f"splats/{sel_id}.vsplat"
            frames = decode_video_splat(vs.read_bytes())
            frame = frames[i % len(frames)]
            img = rasterize_splats(frame, vcam, settings)
            rgb = img[..., :3]
        else:
            if isinstance(sel, str):
                cloud_dir = artifacts / f"clouds/{sel}"
            else:
                cloud_dir = artifacts / f"clouds/{sel[0]}_{sel[1]}"
            plys = _sorted_dir(cloud_dir, {".ply"})
            cloud = read_ply_pointcloud(plys[i % len(plys)].read_bytes())
            rgb = render_pointcloud(cloud, vcam, args.point_size, settings)
        imageio.write_color_png(out_dir / f"frame_{i:05d}.png", np.clip(rgb, 0.0, 1.0))
    print(f"rendered {args.frames} frames -> {out_dir}")
    return EXIT_OK


def _load_any_splat_frames(path: Path) -> list:
    data = path.read_bytes()
    if path.suffix == ".vsplat":
        return decode_video_splat(data)
    if path.suffix == ".splat":
        return [decode_splat_frame(data)]
    if path.suffix == ".ply":
        return [read_ply_gaussian(data)]
    raise ValidationError(f"cannot read splats from {path.suffix!r} files")


def cmd_pack(args) -> int:
    inputs = [Path(p) for p in args.inputs]
    out = Path(args.out)
    if args.to == "vsplat":
        frames = []
        for p in inputs:
            frames.extend(_load_any_splat_frames(p))
        out.write_bytes(encode_video_splat(frames))
        print(f"packed {len(frames)} frames -> {out}")
        return EXIT_OK
    if len(inputs) != 1:
        raise ValidationError(f"--to {args.to} expects exactly one input file")
    frames = _load_any_splat_frames(inputs[0])
    if not 0 <= args.index < len(frames):
        raise ValidationError(f"frame index {args.index} out of range (0..{len(frames) - 1})")
    frame = frames[args.index]
    if args.to == "splat":
        out.write_bytes(encode_splat_frame(frame))
    elif args.to == "ply":
        out.write_bytes(write_ply_gaussian(frame))
    print(f"{len(frame)} splats -> {out}")
    return EXIT_OK


def cmd_sync(args) -> int:
    manifest = load_manifest(args.manifest)
    policy = SyncPolicy(drift_limit_ms=args.drift_limit)
    gate = MotionGate(ang_limit=args.ang_limit, lin_limit=args.lin_limit)
    clusters = sync_frames(manifest, policy)
    result = gate_session(manifest, policy, gate)
    print(f"cameras: {len(manifest.cameras)}")
    print(f"clusters: {len(clusters)}")
    if result.accepted:
        print("gate: accept")
        return EXIT_OK
    print(f"gate: reject ({result.reason})")
    return EXIT_GATE


def cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    policy = SyncPolicy(drift_limit_ms=args.drift_limit)
    if not args.skip_gate:
        result = gate_session(manifest, policy, MotionGate(args.ang_limit, args.lin_limit))
        if not result.accepted:
            print(f"gate: reject ({result.reason})", file=sys.stderr)
            return EXIT_GATE
    params = PipelineParams(
        bilateral=_bilateral_from_args(args),
        quantile=args.quantile,
        erode_px=args.erode_px,
        radius_filter=RadiusFilterParams(args.filter_radius, args.n_min),
        with_normals=args.normals,
        stereo_window=args.window,
        stereo_d_max=args.d_max,
        spatial_only=args.spatial_only,
        max_retries=args.max_retries,
    )
    graph = build_task_graph(manifest, args.out, params, policy, mode=args.mode)
    report = execute(
        graph,
        cpu_workers=args.cpu_workers,
        accel_workers=args.accel_workers,
        report_path=Path(args.out) / "run_report.json",
    )
    summary = report["summary"]
    print("run:", " ".join(f"{k}={v}" for k, v in sorted(summary.items())))
    if summary.get("failed", 0) or summary.get("aborted", 0):
        return EXIT_IO
    return EXIT_OK


def cmd_info(args) -> int:
    path = Path(args.file)
    if not path.exists():
        raise MalformedFileError(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".vsplat":
        frames = decode_video_splat(path.read_bytes())
        sizes = [len(f) for f in frames]
        print(f"video SPLAT stream: {len(frames)} frames, splats per frame: {sizes}")
        print(f"total bytes: {path.stat().st_size}")
    elif suffix == ".splat":
        frame = decode_splat_frame(path.read_bytes())
        print(f"SPLAT frame: {len(frame)} splats, {path.stat().st_size} bytes")
    elif suffix == ".ply":
        data = path.read_bytes()
        try:
            frame = read_ply_gaussian(data)
            print(f"Gaussian PLY: {len(frame)} splats")
        except MalformedFileError:
            cloud = read_ply_pointcloud(data)
            has_n = cloud.normals is not None
            print(f"point cloud PLY: {len(cloud)} points, normals: {'yes' if has_n else 'no'}")
    elif suffix == ".flo":
        flow = imageio.read_flo(path)
        print(f"flow field: {flow.shape[1]}x{flow.shape[0]} px")
    elif suffix == ".json":
        manifest = load_manifest(path)
        frames = sum(len(c.frames) for c in manifest.cameras)
        print(
            f"session manifest: mode={manifest.mode}, rgb_only={manifest.rgb_only}, "
            f"{len(manifest.cameras)} cameras, {frames} frames total"
        )
    elif suffix == ".txt":
        rig = load_rig(path)
        print(f"rig: {len(rig)} cameras: {', '.join(c.id for c in rig)}")
    elif suffix == ".png":
        arr = np.array(__import__("PIL.Image", fromlist=["open"]).open(path))
        print(f"image: {arr.shape[1]}x{arr.shape[0]}, dtype {arr.dtype}")
    else:
        raise ValidationError(f"unsupported file type {suffix!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volcap",
        description="Volumetric capture post-processing: depth filtering, stereo depth, "
        "point clouds, Gaussian splats, codecs, rendering, and the session pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter-depth", help="bilateral (BS/BS+T) filtering over a frame sequence")
    p.add_argument("--depth-dir", required=True, help="directory of 16-bit depth PNGs (mm, 0 invalid)")
    p.add_argument("--color-dir", required=True, help="directory of RGB guidance PNGs")
    p.add_argument("--mask-dir", help="directory of 8-bit foreground masks (>127 foreground)")
    p.add_argument("--flow-dir", help="directory of backward .flo flow fields (enables BS+T)")
    p.add_argument("--out", required=True, help="output directory for filtered depth PNGs")
    _add_bilateral_flags(p)
    p.set_defaults(fn=cmd_filter_depth)

    p = sub.add_parser("stereo-depth", help="rectified pair to depth maps with the flip patch")
    p.add_argument("--first-color", required=True)
    p.add_argument("--second-color", required=True)
    p.add_argument("--first-mask", required=True)
    p.add_argument("--second-mask", required=True)
    p.add_argument("--focal", type=float, required=True, help="rectified focal length in px")
    p.add_argument("--baseline", type=float, required=True, help="stereo baseline in meters (about 0.9 on the reference rig)")
    p.add_argument("--window", type=int, default=5, help="block matcher window in px (default 5)")
    p.add_argument("--d-max", type=int, default=32, help="disparity search magnitude in px (default 32)")
    p.add_argument("--out-first", help="depth map anchored on the first view")
    p.add_argument("--out-second", help="depth map anchored on the second view")
    p.set_defaults(fn=cmd_stereo_depth)

    p = sub.add_parser("reconstruct", help="point cloud (and optionally splats) from one frame")
    p.add_argument("--rig", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--color", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="output .ply path")
    p.add_argument("--filter-radius", type=float, default=0.2, help="radius validity test radius in m (default 0.2)")
    p.add_argument("--n-min", type=int, default=30, help="minimum neighbors inside the radius (default 30)")
    p.add_argument("--normals", action="store_true", help="estimate covariance normals")
    p.add_argument("--normals-radius", type=float, default=0.1, help="normal neighborhood radius in m (default 0.1)")
    p.add_argument("--normals-max-nn", type=int, default=30, help="max neighbors per normal (default 30)")
    p.add_argument("--splat-out", help="also emit a .splat frame here")
    p.add_argument("--splat-inputs", help=".npz with opacity/rot/z pre-activations")
    p.add_argument("--splat-opacity", type=float, default=0.8, help="fallback opacity (default 0.8)")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("render", help="render along a Bezier path with source-camera selection")
    p.add_argument("--rig", required=True)
    p.add_argument("--path", required=True, help="text file with 12 numbers: 4 Bezier control points")
    p.add_argument("--artifacts", required=True, help="pipeline output directory (clouds/, splats/)")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=30, help="number of path samples (default 30)")
    p.add_argument("--mode", choices=("sensor", "stereo"), default="sensor", help="source selection policy")
    p.add_argument("--kind", choices=("clouds", "splats"), default="clouds")
    p.add_argument("--width", type=int, help="render width (default: rig camera width)")
    p.add_argument("--height", type=int, help="render height (default: rig camera height)")
    p.add_argument("--target", default="0,0,0", help="look-at point x,y,z (default 0,0,0)")
    p.add_argument("--point-size", type=int, default=2, help="point splat size in px (default 2)")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("pack", help="convert between .splat, .vsplat, and Gaussian .ply")
    p.add_argument("inputs", nargs="+", help="input file(s)")
    p.add_argument("--to", required=True, choices=("splat", "vsplat", "ply"))
    p.add_argument("--index", type=int, default=0, help="frame index for single-frame outputs (default 0)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pack)

    p = sub.add_parser("sync", help="cluster frames and print the session gate report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--drift-limit", type=float, default=17.0, help="drift rejection limit in ms (default 17)")
    p.add_argument("--ang-limit", type=float, default=0.1, help="angular acceleration limit in rad/s^2 (default 0.1)")
    p.add_argument("--lin-limit", type=float, default=1e-3, help="linear acceleration limit in m/s^2 (default 0.001)")
    p.set_defaults(fn=cmd_sync)

    p = sub.add_parser("run", help="run the full pipeline from a session manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("online", "offline"), help="override the manifest mode")
    p.add_argument("--cpu-workers", type=int, default=_default_workers(), help="cpu pool size (default $VOLCAP_WORKERS or 2)")
    p.add_argument("--accel-workers", type=int, default=_default_workers(), help="accelerator pool size (default $VOLCAP_WORKERS or 2)")
    p.add_argument("--quantile", type=float, default=0.999, help="upper outlier quantile (default 0.999)")
    p.add_argument("--erode-px", type=int, default=2, help="mask edge erosion radius in px (default 2)")
    p.add_argument("--filter-radius", type=float, default=0.2, help="radius validity test radius in m (default 0.2)")
    p.add_argument("--n-min", type=int, default=30, help="minimum radius neighbors (default 30)")
    p.add_argument("--normals", action="store_true", help="estimate normals in cloud tasks")
    p.add_argument("--window", type=int, default=5, help="stereo matcher window (default 5)")
    p.add_argument("--d-max", type=int, default=32, help="stereo search magnitude (default 32)")
    p.add_argument("--drift-limit", type=float, default=17.0, help="drift rejection limit in ms (default 17)")
    p.add_argument("--ang-limit", type=float, default=0.1, help="angular acceleration limit (default 0.1)")
    p.add_argument("--lin-limit", type=float, default=1e-3, help="linear acceleration limit (default 0.001)")
    p.add_argument("--skip-gate", action="store_true", help="run even if the session gate rejects")
    p.add_argument("--max-retries", type=int, default=3, help="per-task retry budget (default 3)")
    _add_bilateral_flags(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("info", help="inspect any supported file")
    p.add_argument("file")
    p.set_defaults(fn=cmd_info)

    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, InvalidInputError, InvalidGeometryError) as e:
        print(f"error: validation: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MalformedFileError, OSError) as e:
        print(f"error: io: {e}", file=sys.stderr)
        return EXIT_IO
    except VolcapError as e:
        print(f"error: internal: {e}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
