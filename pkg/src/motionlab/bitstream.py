"""Bit-exact serialization for both motion paths.

Block path
    Each nonzero motion vector becomes one record: ``dx`` and ``dy`` in
    sign-magnitude form (1 sign bit plus ``ceil(log2(p+1))`` magnitude bits),
    then the x and y centre of the reference block it points to, with
    ``ceil(log2 W)`` and ``ceil(log2 H)`` bits. Zero vectors emit nothing.
    Per-frame record counts are reshaping overhead and are not counted.

    With MVD coding enabled each frame additionally carries its predictor
    (sign-magnitude, same width as a raw component) and the magnitude width
    used for that frame's differences; records then hold ``v - MVP``.

Learned path
    The importance-map prefix and the masked code payload from
    :mod:`motionlab.dba`. A model without bit assignment records ``levels = 0``
    and sends every code channel with no prefix.

Container (``.dmc``), little-endian::

    "DMC1" | kind u8 | W u16 | H u16 | n_ref u8 | n_pred u8 |
    LEARNED: c_bnd u8, levels u8 / BLOCK: algorithm u8 (bit 7 = MVD), mb u8, p u8 |
    payload bit length u32 | payload bytes (last byte zero-padded)

The container payload is overhead, then prefix, then payload bits.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .blockmotion import ALGORITHMS, MotionField
from .dba import bits_to_uint, kept_channels, mask_from_q, pack_code, prefix_width, uint_to_bits, unpack_code
from .errors import FormatError, RangeError, TruncationError

MAGIC = b"DMC1"
KINDS = ("LEARNED_P", "LEARNED_B", "BLOCK")
COUNT_BITS = 16


def _ceil_log2(n: int) -> int:
    return max(0, math.ceil(math.log2(n))) if n > 1 else 0


def component_bits(p: int) -> int:
    return 1 + _ceil_log2(p + 1)


def _coord_bits(extent: int) -> int:
    return _ceil_log2(extent)


def _signmag(values: np.ndarray, mag_bits: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    sign = (values < 0).astype(np.int64)
    return np.concatenate([sign[:, None], uint_to_bits(np.abs(values), mag_bits).reshape(len(values), mag_bits)], axis=1)


def _from_signmag(bits: np.ndarray, mag_bits: int) -> np.ndarray:
    bits = np.asarray(bits).reshape(-1, 1 + mag_bits)
    mag = bits_to_uint(bits[:, 1:], mag_bits) if mag_bits else np.zeros(len(bits), np.int64)
    return np.where(bits[:, 0] == 1, -mag, mag)


@dataclass(frozen=True)
class MvGeometry:
    width: int
    height: int
    mb: int
    p: int = 7

    @property
    def padded(self) -> tuple[int, int]:
        return (math.ceil(self.width / self.mb) * self.mb, math.ceil(self.height / self.mb) * self.mb)

    @property
    def x_bits(self) -> int:
        return _coord_bits(self.padded[0])

    @property
    def y_bits(self) -> int:
        return _coord_bits(self.padded[1])

    def record_bits(self, mag_bits: int | None = None) -> int:
        comp = component_bits(self.p) if mag_bits is None else 1 + mag_bits
        return 2 * comp + self.x_bits + self.y_bits


@dataclass(frozen=True)
class MvPayload:
    """Counted record bits plus the per-frame record counts needed to reshape them."""

    bits: np.ndarray
    counts: tuple[int, ...]
    side: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))

    @property
    def counted_bits(self) -> int:
        return int(self.bits.size + self.side.size)


def _records(field_: MotionField, geo: MvGeometry, values: np.ndarray, mag_bits: int) -> tuple[np.ndarray, int]:
    nz = np.any(field_.vectors != 0, axis=-1)
    cx, cy = field_.centers()
    v = field_.vectors[nz]
    rx = cx[nz] - v[:, 0]
    ry = cy[nz] - v[:, 1]
    vals = values[nz]
    n = len(v)
    if n == 0:
        return np.zeros(0, np.uint8), 0
    w, h = geo.padded
    if rx.min() < 0 or ry.min() < 0 or rx.max() >= w or ry.max() >= h:
        raise RangeError("a vector points its reference block outside the padded frame")
    parts = [
        _signmag(vals[:, 0], mag_bits),
        _signmag(vals[:, 1], mag_bits),
        uint_to_bits(rx, geo.x_bits).reshape(n, geo.x_bits),
        uint_to_bits(ry, geo.y_bits).reshape(n, geo.y_bits),
    ]
    return np.concatenate(parts, axis=1).astype(np.uint8).reshape(-1), n


def _check_range(fields: Sequence[MotionField], p: int) -> None:
    for i, f in enumerate(fields):
        if np.abs(f.vectors).max(initial=0) > p:
            raise RangeError(f"field {i} has a component beyond the search range p={p}")


def encode_mv_payload(fields: Sequence[MotionField], width: int, height: int, p: int = 7, mvd: bool = False) -> MvPayload:
    """Serialize nonzero vectors of each field, in frame then raster order."""
    fields = list(fields)
    _check_range(fields, p)
    if not fields:
        return MvPayload(np.zeros(0, np.uint8), ())
    geo = MvGeometry(width, height, fields[0].block_w, p)
    chunks, counts, side = [], [], []
    if mvd:
        diffs, mvps = mvd_transform(fields, "forward")
    for i, f in enumerate(fields):
        if mvd:
            nz = np.any(f.vectors != 0, axis=-1)
            d = diffs[i].vectors
            mag = _mag_width(np.abs(d[nz]).max(initial=0))
            side.append(_signmag(np.array(mvps[i]), component_bits(p) - 1).reshape(-1))
            side.append(uint_to_bits([mag], _width_field_bits(p)))
            bits, n = _records(f, geo, d, mag)
        else:
            bits, n = _records(f, geo, f.vectors, component_bits(p) - 1)
        chunks.append(bits)
        counts.append(n)
    side_bits = np.concatenate(side).astype(np.uint8) if side else np.zeros(0, np.uint8)
    return MvPayload(np.concatenate(chunks).astype(np.uint8), tuple(counts), side_bits)


def _mag_width(max_abs: int) -> int:
    return int(max_abs).bit_length()


def _width_field_bits(p: int) -> int:
    return (2 * p).bit_length().bit_length()


def decode_mv_payload(
    bits: np.ndarray | MvPayload,
    geometry: MvGeometry,
    counts: Sequence[int] | None = None,
    side: np.ndarray | None = None,
    mvd: bool = False,
) -> list[MotionField]:
    """Inverse of :func:`encode_mv_payload`; blocks without a record get zero vectors.

    Without ``counts`` the whole bit sequence is read as one frame.
    """
    if isinstance(bits, MvPayload):
        counts = bits.counts if counts is None else counts
        side = bits.side if side is None else side
        bits = bits.bits
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    geo = geometry
    comp_mag = component_bits(geo.p) - 1
    n_frames = 1 if counts is None else len(counts)

    mvps, mags = [], []
    if mvd:
        side = np.zeros(0, np.uint8) if side is None else np.asarray(side, np.uint8)
        per = 2 * (1 + comp_mag) + _width_field_bits(geo.p)
        if side.size != per * n_frames:
            raise TruncationError(f"MVD side info needs {per * n_frames} bits, got {side.size}")
        for i in range(n_frames):
            chunk = side[i * per : (i + 1) * per]
            mvps.append(tuple(int(x) for x in _from_signmag(chunk[: 2 * (1 + comp_mag)], comp_mag)))
            mags.append(int(bits_to_uint(chunk[2 * (1 + comp_mag) :], _width_field_bits(geo.p))[0]))
    else:
        mags = [comp_mag] * n_frames

    if counts is None:
        rb = geo.record_bits(mags[0])
        if bits.size % rb:
            raise TruncationError(f"{bits.size} bits is not a whole number of {rb}-bit records")
        counts = [bits.size // rb]
    expected = sum(c * geo.record_bits(m) for c, m in zip(counts, mags))
    if bits.size != expected:
        raise TruncationError(f"MV payload length mismatch: expected {expected} bits, got {bits.size}")

    out, pos = [], 0
    gw = geo.padded[0] // geo.mb
    gh = geo.padded[1] // geo.mb
    for i, n in enumerate(counts):
        mag = mags[i]
        rb = geo.record_bits(mag)
        rec = bits[pos : pos + n * rb].reshape(n, rb)
        pos += n * rb
        comp = 1 + mag
        dx = _from_signmag(rec[:, :comp], mag)
        dy = _from_signmag(rec[:, comp : 2 * comp], mag)
        rx = bits_to_uint(rec[:, 2 * comp : 2 * comp + geo.x_bits], geo.x_bits)
        ry = bits_to_uint(rec[:, 2 * comp + geo.x_bits :], geo.y_bits)
        if mvd:
            dx, dy = dx + mvps[i][0], dy + mvps[i][1]
        vectors = np.zeros((gh, gw, 2), np.int64)
        bx = (rx + dx - geo.mb // 2) // geo.mb
        by = (ry + dy - geo.mb // 2) // geo.mb
        if n and (bx.min() < 0 or by.min() < 0 or bx.max() >= gw or by.max() >= gh):
            raise FormatError(f"frame {i}: record points outside the block grid")
        vectors[by, bx, 0] = dx
        vectors[by, bx, 1] = dy
        out.append(MotionField(geo.mb, geo.mb, geo.width, geo.height, vectors))
    return out


def mvd_transform(fields: Sequence[MotionField], direction: str = "forward", mvps=None):
    """Subtract (forward) or add back (inverse) a per-frame motion-vector predictor.

    The predictor is the component-wise mean of the frame's nonzero vectors,
    rounded half away from zero. Forward returns ``(fields, mvps)``; inverse
    takes the predictors and returns the restored fields.
    """
    fields = list(fields)
    if direction == "forward":
        mvps = []
        out = []
        for f in fields:
            nz = np.any(f.vectors != 0, axis=-1)
            if nz.any():
                m = f.vectors[nz].mean(axis=0)
                mvp = tuple(int(x) for x in np.sign(m) * np.floor(np.abs(m) + 0.5))
            else:
                mvp = (0, 0)
            mvps.append(mvp)
            out.append(MotionField(f.block_w, f.block_h, f.width, f.height, f.vectors - np.array(mvp)))
        return out, mvps
    if direction == "inverse":
        if mvps is None or len(mvps) != len(fields):
            raise ValueError("inverse MVD needs one predictor per field")
        return [
            MotionField(f.block_w, f.block_h, f.width, f.height, f.vectors + np.array(m))
            for f, m in zip(fields, mvps)
        ]
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# container


@dataclass(frozen=True, eq=False)
class CodedGop:
    kind: str
    width: int
    height: int
    n_ref: int
    n_pred: int
    c_bnd: int = 0
    levels: int = 0
    algorithm: str = ""
    mb: int = 0
    p: int = 0
    mvd: bool = False
    overhead: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    prefix: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint8))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FormatError(f"unknown codec kind {self.kind!r}")
        for name in ("overhead", "prefix", "payload"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.uint8).reshape(-1))

    @property
    def learned(self) -> bool:
        return self.kind != "BLOCK"

    @property
    def counted_bits(self) -> int:
        """Bits that carry motion information (headers and reshaping overhead excluded)."""
        return int(self.prefix.size + self.payload.size)

    total_bits = counted_bits

    @property
    def code_dims(self) -> tuple[int, int, int]:
        t = self.n_ref + self.n_pred
        return (math.ceil(t / 8), math.ceil(self.height / 8), math.ceil(self.width / 8))

    @property
    def geometry(self) -> MvGeometry:
        return MvGeometry(self.width, self.height, self.mb, self.p)

    def header_bytes(self) -> int:
        return len(_header(self))

    def __eq__(self, other):
        if not isinstance(other, CodedGop):
            return NotImplemented
        scalars = ("kind", "width", "height", "n_ref", "n_pred", "c_bnd", "levels", "algorithm", "mb", "p", "mvd")
        return all(getattr(self, k) == getattr(other, k) for k in scalars) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("overhead", "prefix", "payload")
        )


def block_gop(fields: Sequence[MotionField], width: int, height: int, n_ref: int, algorithm: str, mb: int, p: int = 7, mvd: bool = False) -> CodedGop:
    payload = encode_mv_payload(fields, width, height, p, mvd)
    overhead = uint_to_bits(payload.counts, COUNT_BITS) if payload.counts else np.zeros(0, np.uint8)
    return CodedGop(
        "BLOCK", width, height, n_ref, len(fields), algorithm=algorithm, mb=mb, p=p, mvd=mvd,
        overhead=overhead, prefix=payload.side, payload=payload.bits,
    )


def block_fields(gop: CodedGop) -> list[MotionField]:
    counts = [int(c) for c in bits_to_uint(gop.overhead, COUNT_BITS)] if gop.overhead.size else [0] * gop.n_pred
    return decode_mv_payload(gop.payload, gop.geometry, counts, gop.prefix, gop.mvd)


def learned_gop(kind: str, width: int, height: int, n_ref: int, n_pred: int, c_bnd: int, levels: int, prefix, payload) -> CodedGop:
    return CodedGop(kind, width, height, n_ref, n_pred, c_bnd=c_bnd, levels=levels, prefix=prefix, payload=payload)


def pack_learned(kind: str, width: int, height: int, n_ref: int, n_pred: int, code, q=None, levels: int = 0) -> CodedGop:
    """Serialize a binary code of shape (c_bnd, t, h, w).

    With ``q`` the importance prefix and masked payload are written; without
    it every channel of every site is sent and ``levels`` is recorded as 0.
    """
    code = np.asarray(code)
    c_bnd = code.shape[0]
    gop = CodedGop(kind, width, height, n_ref, n_pred, c_bnd=c_bnd, levels=levels if q is not None else 0)
    if tuple(code.shape[1:]) != gop.code_dims:
        raise FormatError(f"code dims {code.shape[1:]} do not match the GOP geometry {gop.code_dims}")
    if q is None:
        payload = (code > 0).astype(np.uint8).transpose(1, 2, 3, 0).reshape(-1)
        return learned_gop(kind, width, height, n_ref, n_pred, c_bnd, 0, np.zeros(0, np.uint8), payload)
    packed = pack_code(code, mask_from_q(q, c_bnd, levels), q, levels)
    return learned_gop(kind, width, height, n_ref, n_pred, c_bnd, levels, packed.prefix, packed.payload)


def learned_code(gop: CodedGop) -> np.ndarray:
    """Code tensor (c_bnd, t, h, w) in {-1, 0, +1}; 0 marks masked channels."""
    dims = gop.code_dims
    if gop.levels == 0:
        bits = gop.payload.reshape(dims + (gop.c_bnd,)).astype(np.float32)
        return (2 * bits - 1).transpose(3, 0, 1, 2)
    return unpack_code(np.concatenate([gop.prefix, gop.payload]), dims, gop.c_bnd, gop.levels)


def _header(gop: CodedGop) -> bytes:
    head = MAGIC + struct.pack("<BHHBB", KINDS.index(gop.kind), gop.width, gop.height, gop.n_ref, gop.n_pred)
    if gop.learned:
        head += struct.pack("<BB", gop.c_bnd, gop.levels)
    else:
        algo = ALGORITHMS.index(gop.algorithm) | (0x80 if gop.mvd else 0)
        head += struct.pack("<BBB", algo, gop.mb, gop.p)
    return head


def encode_container(gop: CodedGop) -> bytes:
    bits = np.concatenate([gop.overhead, gop.prefix, gop.payload]).astype(np.uint8)
    return _header(gop) + struct.pack("<I", bits.size) + np.packbits(bits).tobytes()


def _decode_one(data: bytes, pos: int) -> tuple[CodedGop, int]:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncationError(f"container truncated at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad container magic")
    kind_id, w, h, n_ref, n_pred = struct.unpack("<BHHBB", take(7))
    if kind_id >= len(KINDS):
        raise FormatError(f"unknown codec kind id {kind_id}")
    kind = KINDS[kind_id]
    params: dict = {}
    if kind == "BLOCK":
        algo, mb, p = struct.unpack("<BBB", take(3))
        if (algo & 0x7F) >= len(ALGORITHMS):
            raise FormatError(f"unknown algorithm id {algo & 0x7F}")
        params = dict(algorithm=ALGORITHMS[algo & 0x7F], mvd=bool(algo & 0x80), mb=mb, p=p)
    else:
        c_bnd, levels = struct.unpack("<BB", take(2))
        params = dict(c_bnd=c_bnd, levels=levels)
    (nbits,) = struct.unpack("<I", take(4))
    nbytes = (nbits + 7) // 8
    if pos + nbytes > len(data):
        raise TruncationError(f"declared {nbits} payload bits but only {len(data) - pos} bytes remain")
    bits = np.unpackbits(np.frombuffer(take(nbytes), np.uint8))[:nbits]
    gop = CodedGop(kind, w, h, n_ref, n_pred, **params)

    if kind == "BLOCK":
        n_over = COUNT_BITS * n_pred
        if bits.size < n_over:
            raise TruncationError("block payload shorter than its record counts")
        side = 0
        if gop.mvd:
            side = n_pred * (2 * component_bits(gop.p) + _width_field_bits(gop.p))
        overhead, prefix, payload = bits[:n_over], bits[n_over : n_over + side], bits[n_over + side :]
    elif gop.levels == 0:
        expected = int(np.prod(gop.code_dims)) * gop.c_bnd
        if bits.size != expected:
            raise TruncationError(f"learned payload holds {bits.size} bits, full code implies {expected}")
        overhead, prefix, payload = bits[:0], bits[:0], bits
    else:
        sites = int(np.prod(gop.code_dims))
        n_pre = sites * prefix_width(gop.levels)
        if bits.size < n_pre:
            raise TruncationError("learned payload shorter than its importance prefix")
        q = bits_to_uint(bits[:n_pre], prefix_width(gop.levels)) if n_pre else np.zeros(sites, np.int64)
        expected = n_pre + int(kept_channels(q, gop.c_bnd, gop.levels).sum())
        if bits.size != expected:
            raise TruncationError(f"learned payload holds {bits.size} bits, importance map implies {expected}")
        overhead, prefix, payload = bits[:0], bits[:n_pre], bits[n_pre:]
    return CodedGop(kind, w, h, n_ref, n_pred, overhead=overhead, prefix=prefix, payload=payload, **params), pos


def decode_container(data: bytes) -> CodedGop:
    gop, pos = _decode_one(data, 0)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after container")
    return gop


def iter_containers(data: bytes) -> Iterator[CodedGop]:
    pos = 0
    while pos < len(data):
        gop, pos = _decode_one(data, pos)
        yield gop


def write_dmc(path, gops: Sequence[CodedGop]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(encode_container(g) for g in gops))
    tmp.replace(path)


def read_dmc(path) -> list[CodedGop]:
    return list(iter_containers(Path(path).read_bytes()))
