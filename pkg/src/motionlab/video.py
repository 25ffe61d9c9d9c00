"""Frames, GOP clips, raw-video I/O and the pixel-domain plumbing around them."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeError, SizeError, StateError, TruncationError

ROLES = ("I", "P", "B")
PAD_ROLE = "pad"
P_GOP = "P_GOP"
B_GOP = "B_GOP"

# BT.601 full-range coefficients
_RGB2YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YUV2RGB = np.linalg.inv(_RGB2YUV)


@dataclass(frozen=True, eq=False)
class Frame:
    """One picture, stored (height, width, channels).

    ``uint8`` data holds 8-bit samples; float data holds normalized samples
    in [-1, 1]. ``space`` is one of ``rgb``, ``yuv`` or ``gray``.
    """

    data: np.ndarray
    space: str = "rgb"

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3:
            raise ShapeError(f"frame data must be (H, W, C), got shape {d.shape}")
        if d.dtype != np.uint8:
            d = d.astype(np.float32)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def normalized(self) -> bool:
        return self.data.dtype != np.uint8

    def to_uint8(self) -> np.ndarray:
        if not self.normalized:
            return self.data
        return _denorm(self.data)

    def luma(self) -> np.ndarray:
        """8-bit luma plane as int32 (BT.601 for RGB input)."""
        d = self.to_uint8()
        if self.space == "rgb" and self.channels == 3:
            y = d.astype(np.float64) @ _RGB2YUV[0]
            return np.clip(np.rint(y), 0, 255).astype(np.int32)
        return d[:, :, 0].astype(np.int32)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.space == other.space
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


def _denorm(d: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((d.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class GopClip:
    """An ordered run of frames with I/P/B roles.

    A clip straight off disk has no structure yet (``gop_kind`` is None and
    ``roles`` empty); :func:`structure_gop` assigns them.
    """

    frames: tuple[Frame, ...]
    roles: tuple[str, ...] = ()
    gop_kind: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "roles", tuple(self.roles))
        if frames:
            ref = frames[0]
            for i, f in enumerate(frames):
                if (f.height, f.width, f.channels) != (ref.height, ref.width, ref.channels):
                    raise ShapeError(f"frame {i} is {f.data.shape}, expected {ref.data.shape}")
        if self.gop_kind is not None:
            _check_roles(self.roles, self.gop_kind, len(frames))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def channels(self) -> int:
        return self.frames[0].channels

    @property
    def normalized(self) -> bool:
        return self.frames[0].normalized

    @property
    def space(self) -> str:
        return self.frames[0].space

    def array(self) -> np.ndarray:
        """Stacked samples, shape (T, H, W, C)."""
        return np.stack([f.data for f in self.frames])

    def indices(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]

    @property
    def reference_indices(self) -> list[int]:
        return self.indices("I")

    @property
    def referencing_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r in ("P", "B")]

    def __eq__(self, other):
        if not isinstance(other, GopClip):
            return NotImplemented
        return (
            self.roles == other.roles
            and self.gop_kind == other.gop_kind
            and len(self.frames) == len(other.frames)
            and all(a == b for a, b in zip(self.frames, other.frames))
        )


def _check_roles(roles: Sequence[str], kind: str, n: int) -> None:
    if len(roles) != n:
        raise ShapeError(f"{len(roles)} roles for {n} frames")
    core = [r for r in roles if r != PAD_ROLE]
    if PAD_ROLE in roles[: len(core)]:
        raise ShapeError("padding frames must trail the GOP")
    if kind == P_GOP:
        ok = len(core) >= 2 and core[0] == "I" and all(r == "P" for r in core[1:])
    elif kind == B_GOP:
        ok = len(core) >= 3 and core[0] == "I" and core[-1] == "I" and all(r == "B" for r in core[1:-1])
    else:
        raise ValueError(f"unknown GOP kind {kind!r}")
    if not ok:
        raise ShapeError(f"roles {roles} do not form a {kind}")


def clip_from_array(arr: np.ndarray, space: str = "rgb", **kwargs) -> GopClip:
    """Build a clip from a (T, H, W, C) or (T, H, W) array."""
    return GopClip(tuple(Frame(a, space) for a in arr), **kwargs)


# ---------------------------------------------------------------------------
# normalization and colour


def normalize(clip: GopClip) -> GopClip:
    if clip.normalized:
        raise StateError("clip is already normalized")
    frames = tuple(Frame(f.data.astype(np.float32) / np.float32(127.5) - np.float32(1.0), f.space) for f in clip.frames)
    return replace(clip, frames=frames)


def denormalize(clip: GopClip) -> GopClip:
    if not clip.normalized:
        raise StateError("clip already holds 8-bit samples")
    return replace(clip, frames=tuple(Frame(_denorm(f.data), f.space) for f in clip.frames))


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    yuv = rgb.astype(np.float64) @ _RGB2YUV.T
    yuv[..., 1:] += 128.0
    return np.clip(np.rint(yuv), 0, 255).astype(np.uint8)


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    v = yuv.astype(np.float64)
    v[..., 1:] -= 128.0
    return np.clip(np.rint(v @ _YUV2RGB.T), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# GOP structure and padding


def structure_gop(frames: Sequence[Frame] | GopClip, kind: str) -> GopClip:
    """Assign I/P/B roles: ``I P P ...`` for P GOPs, ``I B ... B I`` for B GOPs."""
    frames = tuple(frames.frames if isinstance(frames, GopClip) else frames)
    n = len(frames)
    if kind == P_GOP:
        if n < 2:
            raise SizeError(f"a P GOP needs at least 2 frames, got {n}")
        roles = ("I",) + ("P",) * (n - 1)
    elif kind == B_GOP:
        if n < 3:
            raise SizeError(f"a B GOP needs at least 3 frames, got {n}")
        roles = ("I",) + ("B",) * (n - 2) + ("I",)
    else:
        raise ValueError(f"unknown GOP kind {kind!r}")
    return GopClip(frames, roles, kind)


def pad_clip(clip: GopClip, multiple: int) -> tuple[GopClip, tuple[int, int, int]]:
    """Replicate edges so T, H and W become multiples of ``multiple``.

    Returns the padded clip and the original (T, H, W). Added frames carry the
    ``pad`` role when the clip is structured.
    """
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    t, h, w = len(clip), clip.height, clip.width
    tp, hp, wp = (math.ceil(n / multiple) * multiple for n in (t, h, w))
    dims = (t, h, w)
    if (tp, hp, wp) == dims:
        return clip, dims
    frames = []
    for f in clip.frames:
        d = np.pad(f.data, ((0, hp - h), (0, wp - w), (0, 0)), mode="edge")
        frames.append(Frame(d, f.space))
    frames += [frames[-1]] * (tp - t)
    roles = clip.roles + (PAD_ROLE,) * (tp - t) if clip.roles else ()
    return replace(clip, frames=tuple(frames), roles=roles), dims


def crop_clip(clip: GopClip, dims: tuple[int, int, int]) -> GopClip:
    t, h, w = dims
    frames = tuple(Frame(f.data[:h, :w], f.space) for f in clip.frames[:t])
    roles = clip.roles[:t] if clip.roles else ()
    return replace(clip, frames=frames, roles=roles)


# ---------------------------------------------------------------------------
# YUV4MPEG2 and raw planar files

_Y4M_MAGIC = b"YUV4MPEG2"


def _parse_header(line: bytes) -> tuple[dict[str, str], list[str]]:
    tokens = line.decode("ascii", errors="replace").split()
    if not tokens or tokens[0] != "YUV4MPEG2":
        raise FormatError("missing YUV4MPEG2 signature")
    params: dict[str, str] = {}
    for tok in tokens[1:]:
        if not tok:
            continue
        params[tok[0]] = tok[1:]
    for key in ("W", "H"):
        if key not in params or not re.fullmatch(r"\d+", params[key]) or int(params[key]) <= 0:
            raise FormatError(f"y4m header lacks a valid {key} field")
    return params, tokens[1:]


def _chroma_kind(tag: str) -> str:
    if tag.startswith("444"):
        return "444"
    if tag.startswith("420") or tag == "":
        return "420"
    if tag == "mono":
        return "mono"
    raise FormatError(f"unsupported y4m chroma subsampling C{tag}")


def _upsample(plane: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)[:h, :w]


def load_y4m(path) -> GopClip:
    """Read a YUV4MPEG2 file into an unstructured 3-channel 8-bit YUV clip."""
    buf = Path(path).read_bytes()
    if not buf.startswith(_Y4M_MAGIC):
        raise FormatError(f"{path}: not a YUV4MPEG2 file")
    eol = buf.find(b"\n")
    if eol < 0:
        raise FormatError(f"{path}: unterminated y4m header")
    params, tokens = _parse_header(buf[:eol])
    w, h = int(params["W"]), int(params["H"])
    chroma = _chroma_kind(params.get("C", ""))
    cw, ch = (w, h) if chroma == "444" else ((w + 1) // 2, (h + 1) // 2)
    plane_sizes = [w * h] if chroma == "mono" else [w * h, cw * ch, cw * ch]
    frame_bytes = sum(plane_sizes)

    frames = []
    pos = eol + 1
    index = 0
    while pos < len(buf):
        if not buf.startswith(b"FRAME", pos):
            raise TruncationError(f"{path}: frame {index} lacks a FRAME marker at byte {pos}")
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise TruncationError(f"{path}: frame {index} header is unterminated")
        pos = nl + 1
        if pos + frame_bytes > len(buf):
            raise TruncationError(
                f"{path}: frame {index} payload truncated ({len(buf) - pos} of {frame_bytes} bytes)"
            )
        raw = np.frombuffer(buf, dtype=np.uint8, count=frame_bytes, offset=pos)
        pos += frame_bytes
        y = raw[: w * h].reshape(h, w)
        if chroma == "mono":
            u = v = np.full((h, w), 128, np.uint8)
        else:
            u = raw[w * h : w * h + cw * ch].reshape(ch, cw)
            v = raw[w * h + cw * ch :].reshape(ch, cw)
            if chroma == "420":
                u, v = _upsample(u, h, w), _upsample(v, h, w)
        frames.append(Frame(np.stack([y, u, v], axis=-1), "yuv"))
        index += 1
    return GopClip(tuple(frames), meta={"y4m_tokens": tokens, "chroma": chroma})


def _chroma_planes(frame: Frame, chroma: str) -> list[np.ndarray]:
    d = frame.to_uint8()
    if frame.space == "rgb":
        d = rgb_to_yuv(d)
    elif frame.space == "gray":
        d = np.concatenate([d[:, :, :1], np.full(d.shape[:2] + (2,), 128, np.uint8)], axis=-1)
    y, u, v = d[:, :, 0], d[:, :, 1], d[:, :, 2]
    if chroma == "mono":
        return [y]
    if chroma == "420":
        u, v = u[::2, ::2], v[::2, ::2]
    return [y, u, v]


_CHROMA_TAGS = {"444": "C444", "420": "C420jpeg", "mono": "Cmono"}


def _header_tokens(clip: GopClip, chroma: str, fps: str) -> list[str]:
    tokens = clip.meta.get("y4m_tokens")
    if not tokens:
        return [f"W{clip.width}", f"H{clip.height}", f"F{fps}", "Ip", "A1:1", _CHROMA_TAGS[chroma]]
    same_chroma = chroma == clip.meta.get("chroma")
    out = []
    for tok in tokens:
        if tok.startswith("W"):
            tok = f"W{clip.width}"
        elif tok.startswith("H"):
            tok = f"H{clip.height}"
        elif tok.startswith("C") and not same_chroma:
            tok = _CHROMA_TAGS[chroma]
        out.append(tok)
    if not same_chroma and not any(t.startswith("C") for t in out):
        out.append(_CHROMA_TAGS[chroma])
    return out


def save_y4m(path, clip: GopClip, chroma: str | None = None, fps: str = "25:1") -> None:
    """Write a clip as YUV4MPEG2; RGB clips are converted with BT.601.

    Header tokens read by :func:`load_y4m` are written back unchanged, so an
    untouched clip round-trips byte for byte.
    """
    chroma = chroma or clip.meta.get("chroma", "444")
    out = [b"YUV4MPEG2 " + " ".join(_header_tokens(clip, chroma, fps)).encode("ascii") + b"\n"]
    for f in clip.frames:
        out.append(b"FRAME\n")
        out.extend(np.ascontiguousarray(p).tobytes() for p in _chroma_planes(f, chroma))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def load_yuv(path, width: int, height: int, frames: int | None = None) -> GopClip:
    """Read raw planar 4:2:0 (I420) samples."""
    buf = Path(path).read_bytes()
    cw, ch = (width + 1) // 2, (height + 1) // 2
    size = width * height + 2 * cw * ch
    available = len(buf) // size
    n = available if frames is None else frames
    if frames is not None and frames > available:
        raise TruncationError(f"{path}: frame {available} truncated, file holds {available} of {frames} frames")
    if frames is None and len(buf) % size:
        raise TruncationError(f"{path}: frame {available} truncated ({len(buf) % size} of {size} bytes)")
    out = []
    for i in range(n):
        raw = np.frombuffer(buf, np.uint8, size, i * size)
        y = raw[: width * height].reshape(height, width)
        u = _upsample(raw[width * height : width * height + cw * ch].reshape(ch, cw), height, width)
        v = _upsample(raw[width * height + cw * ch :].reshape(ch, cw), height, width)
        out.append(Frame(np.stack([y, u, v], axis=-1), "yuv"))
    return GopClip(tuple(out), meta={"chroma": "420"})


def save_yuv(path, clip: GopClip) -> None:
    data = b"".join(np.ascontiguousarray(p).tobytes() for f in clip.frames for p in _chroma_planes(f, "420"))
    Path(path).write_bytes(data)
