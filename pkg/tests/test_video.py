import numpy as np
import pytest
from hypothesis import given, strategies as st

from motionlab import video as V
from motionlab.errors import FormatError, ShapeError, SizeError, StateError, TruncationError


def _clip(t=3, h=4, w=4, seed=0, space="rgb"):
    arr = np.random.default_rng(seed).integers(0, 256, size=(t, h, w, 3)).astype(np.uint8)
    return V.clip_from_array(arr, space)


def _write_y4m(path, header: bytes, frames: list[bytes]):
    path.write_bytes(header + b"\n" + b"".join(b"FRAME\n" + f for f in frames))


# ---------------------------------------------------------------------------
# y4m


def test_y4m_444_constant(tmp_path):
    p = tmp_path / "c.y4m"
    _write_y4m(p, b"YUV4MPEG2 W4 H4 F25:1 C444", [bytes([128]) * 48] * 2)
    clip = V.load_y4m(p)
    assert len(clip) == 2
    assert all(np.all(f.data == 128) for f in clip.frames)


def test_y4m_420_dimensions(tmp_path):
    p = tmp_path / "c.y4m"
    per_frame = 16 * 8 * 3 // 2
    assert per_frame == 192
    _write_y4m(p, b"YUV4MPEG2 W16 H8 F25:1 C420", [bytes(range(per_frame))] * 3)
    clip = V.load_y4m(p)
    assert len(clip) == 3
    assert clip.frames[0].data.shape == (8, 16, 3)
    # nearest-neighbour chroma: each 2x2 luma block shares one chroma sample
    u = clip.frames[0].data[..., 1]
    assert np.all(u[0::2, 0::2] == u[1::2, 1::2])


def test_y4m_missing_frame_marker(tmp_path):
    p = tmp_path / "bad.y4m"
    p.write_bytes(b"YUV4MPEG2 W4 H4 F25:1 C444\n" + bytes(48))
    with pytest.raises(TruncationError, match="frame 0"):
        V.load_y4m(p)


def test_y4m_truncated_payload_names_frame(tmp_path):
    p = tmp_path / "short.y4m"
    p.write_bytes(b"YUV4MPEG2 W4 H4 F25:1 C444\nFRAME\n" + bytes(48) + b"FRAME\n" + bytes(20))
    with pytest.raises(TruncationError, match="frame 1"):
        V.load_y4m(p)


def test_y4m_bad_header(tmp_path):
    p = tmp_path / "x.y4m"
    p.write_bytes(b"NOTY4M W4 H4\n")
    with pytest.raises(FormatError):
        V.load_y4m(p)


def test_y4m_444_round_trip_bytes(tmp_path):
    src = tmp_path / "a.y4m"
    rng = np.random.default_rng(5)
    _write_y4m(src, b"YUV4MPEG2 W6 H4 F30000:1001 Ip A1:1 C444", [rng.bytes(72) for _ in range(3)])
    clip = V.load_y4m(src)
    out = tmp_path / "b.y4m"
    V.save_y4m(out, clip)
    assert out.read_bytes() == src.read_bytes()


def test_yuv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    raw = rng.bytes(8 * 4 * 3 // 2 * 2)
    p = tmp_path / "a.yuv"
    p.write_bytes(raw)
    clip = V.load_yuv(p, 8, 4)
    assert len(clip) == 2
    q = tmp_path / "b.yuv"
    V.save_yuv(q, clip)
    assert q.read_bytes() == raw


# ---------------------------------------------------------------------------
# normalization


def test_normalize_endpoints():
    arr = np.array([0, 255, 128], np.uint8).reshape(1, 1, 3, 1)
    clip = V.normalize(V.clip_from_array(arr))
    vals = clip.frames[0].data.ravel()
    assert vals[0] == -1.0 and vals[1] == 1.0
    assert vals[2] == pytest.approx(128 / 127.5 - 1, abs=1e-7)  # float32 working precision


def test_normalize_round_trip_all_values():
    arr = np.arange(256, dtype=np.uint8).reshape(1, 16, 16, 1)
    back = V.denormalize(V.normalize(V.clip_from_array(arr, "gray")))
    np.testing.assert_array_equal(back.frames[0].data[..., 0], arr[0, ..., 0])


def test_double_normalize_is_state_error():
    with pytest.raises(StateError):
        V.normalize(V.normalize(_clip()))


def test_colour_round_trip_is_close():
    rgb = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    back = V.yuv_to_rgb(V.rgb_to_yuv(rgb))
    assert np.abs(back.astype(int) - rgb).max() <= 2


# ---------------------------------------------------------------------------
# GOP structure and padding


def test_structure_p_gop():
    clip = V.structure_gop(_clip(17), V.P_GOP)
    assert clip.roles == ("I",) + ("P",) * 16
    assert len(clip.referencing_indices) == 16


def test_structure_b_gop():
    clip = V.structure_gop(_clip(18), V.B_GOP)
    assert clip.roles == ("I",) + ("B",) * 16 + ("I",)
    assert clip.reference_indices == [0, 17]


def test_structure_too_short():
    with pytest.raises(SizeError):
        V.structure_gop(_clip(2), V.B_GOP)
    with pytest.raises(SizeError):
        V.structure_gop(_clip(1), V.P_GOP)


def test_bad_roles_rejected():
    frames = _clip(3).frames
    with pytest.raises(ShapeError):
        V.GopClip(frames, ("P", "I", "P"), V.P_GOP)


def test_mixed_geometry_rejected():
    with pytest.raises(ShapeError):
        V.GopClip((V.Frame(np.zeros((4, 4, 3), np.uint8)), V.Frame(np.zeros((4, 5, 3), np.uint8))))


@pytest.mark.parametrize(
    "t,h,w,expected",
    [(17, 64, 64, (24, 64, 64)), (16, 64, 64, (16, 64, 64)), (18, 60, 60, (24, 64, 64))],
)
def test_pad_examples(t, h, w, expected):
    clip = V.clip_from_array(np.zeros((t, h, w, 3), np.uint8))
    padded, dims = V.pad_clip(clip, 8)
    assert (len(padded), padded.height, padded.width) == expected
    assert dims == (t, h, w)


def test_pad_marks_trailing_frames():
    padded, _ = V.pad_clip(V.structure_gop(_clip(17, 8, 8), V.P_GOP), 8)
    assert padded.roles[-7:] == (V.PAD_ROLE,) * 7
    assert padded.referencing_indices == list(range(1, 17))


@given(st.integers(1, 10), st.integers(1, 12), st.integers(1, 12), st.integers(1, 8))
def test_pad_then_crop_is_identity(t, h, w, m):
    clip = _clip(t, h, w, seed=t * 100 + h)
    padded, dims = V.pad_clip(clip, m)
    assert len(padded) % m == 0 and padded.height % m == 0 and padded.width % m == 0
    assert V.crop_clip(padded, dims) == clip
