import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volcap.codec import (
    SPLAT_RECORD_SIZE,
    decode_splat_frame,
    decode_video_splat,
    encode_splat_frame,
    encode_video_splat,
    read_ply_gaussian,
    read_ply_pointcloud,
    write_ply_gaussian,
    write_ply_pointcloud,
)
from volcap.errors import MalformedFileError
from volcap.pointcloud import PointCloud
from volcap.splats import SplatFrame


def _random_frame(rng, n, frame_index=0):
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    return SplatFrame(
        rng.normal(size=(n, 3)),
        rot,
        rng.random((n, 3)) * 0.05,
        rng.random((n, 3)),
        rng.random(n),
        frame_index=frame_index,
    )


class TestSplatRecord:
    def test_empty_frame_zero_bytes(self):
        frame = SplatFrame(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
        assert encode_splat_frame(frame) == b""

    def test_golden_record_layout(self):
        # Hand-assembled 32-byte record: position (1.5, -2.0, 0.25),
        # scales (0.5, 0.25, 1.0), color (1, 0.5, 0) opacity 1, identity
        # rotation (w,x,y,z) = (1,0,0,0) -> bytes (255,128,128,128).
        frame = SplatFrame(
            [[1.5, -2.0, 0.25]],
            [[1.0, 0.0, 0.0, 0.0]],
            [[0.5, 0.25, 1.0]],
            [[1.0, 0.5, 0.0]],
            [1.0],
        )
        data = encode_splat_frame(frame)
        golden = (
            struct.pack("<3f", 1.5, -2.0, 0.25)
            + struct.pack("<3f", 0.5, 0.25, 1.0)
            + bytes([255, 128, 0, 255])
            + bytes([255, 128, 128, 128])
        )
        assert len(data) == 32
        assert data == golden
        # field offsets 0 / 12 / 24 / 28
        assert struct.unpack("<f", data[0:4])[0] == 1.5
        assert struct.unpack("<f", data[12:16])[0] == 0.5
        assert data[24] == 255 and data[27] == 255
        assert data[28] == 255

    def test_decode_golden(self):
        golden = (
            struct.pack("<3f", 1.5, -2.0, 0.25)
            + struct.pack("<3f", 0.5, 0.25, 1.0)
            + bytes([255, 128, 0, 255])
            + bytes([255, 128, 128, 128])
        )
        frame = decode_splat_frame(golden)
        assert len(frame) == 1
        assert np.allclose(frame.mu[0], [1.5, -2.0, 0.25])
        assert np.allclose(frame.scales[0], [0.5, 0.25, 1.0])
        assert np.allclose(frame.color[0], [1.0, 128 / 255, 0.0])
        assert frame.opacity[0] == 1.0
        assert np.allclose(frame.rot[0], [1.0, 0.0, 0.0, 0.0])

    def test_truncated_record_errors_with_offset(self):
        with pytest.raises(MalformedFileError) as exc:
            decode_splat_frame(b"\x00" * 40)
        assert exc.value.offset == 32

    def test_round_trip_idempotent(self, rng):
        frame = _random_frame(rng, 300)
        b1 = encode_splat_frame(frame)
        decoded = decode_splat_frame(b1)
        b2 = encode_splat_frame(decoded)
        assert b1 == b2
        decoded2 = decode_splat_frame(b2)
        assert np.array_equal(decoded.mu, decoded2.mu)
        assert np.array_equal(decoded.rot, decoded2.rot)
        assert np.array_equal(decoded.scales, decoded2.scales)

    def test_quantization_error_bounds(self, rng):
        frame = _random_frame(rng, 500)
        decoded = decode_splat_frame(encode_splat_frame(frame))
        assert np.max(np.abs(decoded.color - frame.color)) <= 1.0 / 510.0 + 1e-12
        assert np.max(np.abs(decoded.opacity - frame.opacity)) <= 1.0 / 510.0 + 1e-12
        # quaternion: one step quantization + possible one-step snap +
        # renormalization effect
        flip = np.sign(np.sum(decoded.rot * frame.rot, axis=1, keepdims=True))
        assert np.max(np.abs(decoded.rot * flip - frame.rot)) <= 2.0 / 128.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 8))
    def test_round_trip_property(self, seed, n):
        rng = np.random.default_rng(seed)
        frame = _random_frame(rng, n)
        b1 = encode_splat_frame(frame)
        b2 = encode_splat_frame(decode_splat_frame(b1))
        assert b1 == b2


class TestVideoSplat:
    def test_empty_stream_header_only(self):
        data = encode_video_splat([])
        assert len(data) == 10
        assert decode_video_splat(data) == []

    def test_size_formula(self, rng):
        frames = [_random_frame(rng, 1, i) for i in range(3)]
        data = encode_video_splat(frames)
        assert len(data) == 10 + 4 * 3 + 3 * 32
        assert len(data) == 118

    def test_round_trip_frame_exact(self, rng):
        frames = [_random_frame(rng, int(rng.integers(0, 50)), i) for i in range(5)]
        quantized = [decode_splat_frame(encode_splat_frame(f), frame_index=i) for i, f in enumerate(frames)]
        back = decode_video_splat(encode_video_splat(frames))
        assert len(back) == 5
        for q, b in zip(quantized, back):
            assert np.array_equal(q.mu, b.mu)
            assert np.array_equal(q.rot, b.rot)
            assert np.array_equal(q.scales, b.scales)
            assert np.array_equal(q.color, b.color)
            assert np.array_equal(q.opacity, b.opacity)

    def test_header_errors(self, rng):
        data = bytearray(encode_video_splat([_random_frame(rng, 2)]))
        bad_magic = bytes(b"XSPL") + bytes(data[4:])
        with pytest.raises(MalformedFileError):
            decode_video_splat(bad_magic)
        bad_version = bytes(data[:4]) + struct.pack("<H", 9) + bytes(data[6:])
        with pytest.raises(MalformedFileError):
            decode_video_splat(bad_version)
        with pytest.raises(MalformedFileError):
            decode_video_splat(bytes(data[:8]))
        # size table inconsistency
        corrupt = bytearray(data)
        corrupt[10] ^= 0x01
        with pytest.raises(MalformedFileError):
            decode_video_splat(bytes(corrupt))

    def test_header_fuzz_no_crash_no_silent_acceptance(self, rng):
        frame = SplatFrame(
            [[1.5, 2.5, 3.5], [4.5, 5.5, 6.5]],
            [[1.0, 0, 0, 0], [0, 1.0, 0, 0]],
            [[0.01] * 3] * 2,
            [[0.5] * 3] * 2,
            [0.5, 0.5],
        )
        golden = encode_video_splat([frame, frame, frame])
        header_len = 10 + 4 * 3
        baseline = decode_video_splat(golden)
        assert len(baseline) == 3
        fuzz = np.random.default_rng(2024)
        rejected = 0
        for _ in range(2000):
            pos = int(fuzz.integers(0, header_len))
            bit = 1 << int(fuzz.integers(0, 8))
            corrupt = bytearray(golden)
            corrupt[pos] ^= bit
            try:
                decode_video_splat(bytes(corrupt))
            except MalformedFileError:
                rejected += 1
        assert rejected == 2000  # every header corruption detected


class TestPlyPointcloud:
    def test_single_point_payload_size(self):
        cloud = PointCloud([[1.0, 2.0, 3.0]], [[1.0, 0.0, 0.5]])
        data = write_ply_pointcloud(cloud)
        header_end = data.find(b"end_header\n") + len(b"end_header\n")
        assert len(data) - header_end == 15
        with_normals = PointCloud([[1.0, 2.0, 3.0]], [[1.0, 0.0, 0.5]], normals=[[0.0, 0.0, 1.0]])
        data2 = write_ply_pointcloud(with_normals)
        header_end2 = data2.find(b"end_header\n") + len(b"end_header\n")
        assert len(data2) - header_end2 == 27

    def test_round_trip_exact_at_stored_precision(self, rng):
        cloud = PointCloud(rng.normal(size=(200, 3)), rng.random((200, 3)))
        back = read_ply_pointcloud(write_ply_pointcloud(cloud))
        assert np.array_equal(back.positions, cloud.positions.astype(np.float32).astype(np.float64))
        assert write_ply_pointcloud(back) == write_ply_pointcloud(
            read_ply_pointcloud(write_ply_pointcloud(back))
        )

    def test_ascii_ply_fixture(self):
        # Classic ascii cube-corner sample with documented values.
        text = (
            "ply\n"
            "format ascii 1.0\n"
            "comment made by hand\n"
            "element vertex 4\n"
            "property float x\n"
            "property float y\n"
            "property float z\n"
            "property uchar red\n"
            "property uchar green\n"
            "property uchar blue\n"
            "end_header\n"
            "0 0 0 255 0 0\n"
            "1 0 0 0 255 0\n"
            "0 1 0 0 0 255\n"
            "0 0 1 255 255 255\n"
        )
        cloud = read_ply_pointcloud(text.encode("ascii"))
        assert len(cloud) == 4
        assert np.array_equal(cloud.positions, [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        assert np.allclose(cloud.colors[0], [1.0, 0.0, 0.0])
        assert np.allclose(cloud.colors[3], [1.0, 1.0, 1.0])

    def test_unsupported_layout_errors(self):
        with pytest.raises(MalformedFileError):
            read_ply_pointcloud(b"not a ply")
        text = (
            "ply\nformat ascii 1.0\nelement vertex 1\n"
            "property float a\nproperty float b\nproperty float c\n"
            "end_header\n1 2 3\n"
        )
        with pytest.raises(MalformedFileError, match="'x'"):
            read_ply_pointcloud(text.encode())
        listy = "ply\nformat ascii 1.0\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
        with pytest.raises(MalformedFileError):
            read_ply_pointcloud(listy.encode())

    def test_nan_normals_round_trip(self, rng):
        normals = np.array([[0.0, 0.0, 1.0], [np.nan, np.nan, np.nan]])
        cloud = PointCloud(rng.normal(size=(2, 3)), rng.random((2, 3)), normals=normals)
        back = read_ply_pointcloud(write_ply_pointcloud(cloud))
        assert np.allclose(back.normals[0], [0, 0, 1])
        assert np.isnan(back.normals[1]).all()


class TestPlyGaussian:
    def test_color_convention_fixed_point(self, rng):
        frame = SplatFrame([[0.0, 0.0, 0.0]], [[1, 0, 0, 0]], [[0.01] * 3], [[0.5] * 3], [0.5])
        data = write_ply_gaussian(frame)
        cols, n = __import__("volcap.codec", fromlist=["_read_vertex_table"])._read_vertex_table(data)
        assert n == 1
        assert abs(cols["f_dc_0"][0]) < 1e-7  # color 0.5 <-> f_dc 0
        assert abs(cols["opacity"][0]) < 1e-6  # opacity 0.5 <-> logit 0

    def test_round_trip(self, rng):
        frame = _random_frame(rng, 100)
        back = read_ply_gaussian(write_ply_gaussian(frame))
        assert np.array_equal(back.mu, frame.mu.astype(np.float32).astype(np.float64))
        assert np.max(np.abs(back.color - frame.color)) < 1e-6
        assert np.max(np.abs(back.opacity - frame.opacity)) < 1e-6
        assert np.max(np.abs(back.scales - frame.scales)) < 1e-6
        flip = np.sign(np.sum(back.rot * frame.rot, axis=1, keepdims=True))
        assert np.max(np.abs(back.rot * flip - frame.rot)) < 1e-6

    def test_extreme_opacity_and_scale(self):
        frame = SplatFrame(
            [[0, 0, 0], [1, 1, 1]],
            [[1, 0, 0, 0], [1, 0, 0, 0]],
            [[0.0, 0.01, 0.02], [0.01, 0.01, 0.01]],
            [[0.5] * 3] * 2,
            [0.0, 1.0],
        )
        back = read_ply_gaussian(write_ply_gaussian(frame))
        assert back.opacity[0] == 0.0 and back.opacity[1] == 1.0
        assert back.scales[0, 0] == 0.0

    def test_missing_property_named(self, rng):
        frame = _random_frame(rng, 2)
        data = write_ply_gaussian(frame)
        broken = data.replace(b"property float rot_3", b"property float rot_x")
        with pytest.raises(MalformedFileError, match="rot_3"):
            read_ply_gaussian(broken)


def test_deterministic_encoders(rng):
    frame = _random_frame(rng, 64)
    assert encode_splat_frame(frame) == encode_splat_frame(frame)
    assert encode_video_splat([frame]) == encode_video_splat([frame])
    cloud = PointCloud(rng.normal(size=(10, 3)), rng.random((10, 3)))
    assert write_ply_pointcloud(cloud) == write_ply_pointcloud(cloud)
