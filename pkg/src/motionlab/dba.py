"""3D dynamic bit assignment.

An importance map with one value in (0, 1) per code site decides how many of
the ``c_bnd`` code channels are transmitted there. Values are quantized to
``levels`` integer steps; channel ``c`` (1-based) survives while
``c <= (c_bnd / levels) * Q``. The quantized map itself is sent ahead of the
payload as fixed-width unsigned integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, TruncationError
from .tensor import Tensor

EPS = 1e-6


@dataclass(frozen=True)
class ImportanceMap:
    values: np.ndarray  # (t, h, w), strictly inside (0, 1)
    levels: int
    c_bnd: int

    def __post_init__(self):
        check_levels(self.c_bnd, self.levels)
        v = np.clip(np.asarray(self.values, dtype=np.float64), EPS, 1 - EPS)
        object.__setattr__(self, "values", v)


def check_levels(c_bnd: int, levels: int) -> None:
    if levels < 1 or levels > c_bnd or c_bnd % levels:
        raise ConfigError(f"levels={levels} must divide c_bnd={c_bnd} and not exceed it")


def prefix_width(levels: int) -> int:
    """Bits per site for the quantized importance value."""
    return math.ceil(math.log2(levels)) if levels > 1 else 0


def quantize_importance(values, levels: int | None = None) -> np.ndarray:
    """``floor(levels * b)`` elementwise, as int64 in ``[0, levels - 1]``."""
    if isinstance(values, ImportanceMap):
        levels = values.levels
        values = values.values
    b = np.clip(np.asarray(values, dtype=np.float64), EPS, 1 - EPS)
    return np.minimum(np.floor(levels * b), levels - 1).astype(np.int64)


def kept_channels(q: np.ndarray, c_bnd: int, levels: int) -> np.ndarray:
    return (c_bnd // levels) * np.asarray(q)


def mask_from_q(q: np.ndarray, c_bnd: int, levels: int) -> np.ndarray:
    """Binary mask with channel axis inserted before the site axes of ``q``."""
    q = np.asarray(q)
    channel = np.arange(1, c_bnd + 1).reshape((c_bnd,) + (1,) * q.ndim)
    return (channel <= kept_channels(q, c_bnd, levels)[None]).astype(np.float32)


def mask_grad_factor(b: np.ndarray, c_bnd: int, levels: int) -> np.ndarray:
    """Surrogate d m_c / d b for every channel; shape (c_bnd,) + b.shape."""
    b = np.asarray(b, dtype=np.float64)
    c = np.arange(1, c_bnd + 1).reshape((c_bnd,) + (1,) * b.ndim)
    centre = np.ceil(c * levels / c_bnd)
    lb = levels * b[None]
    inside = (lb - 1 <= centre) & (centre <= lb + 2)
    return np.where(inside, float(levels), 0.0)


def build_mask(bmap: Tensor, c_bnd: int, levels: int) -> Tensor:
    """Channel mask for a (batch, 1, t, h, w) importance tensor.

    Forward is the hard quantized mask; backward replaces the step function
    with the banded constant surrogate and sums over channels.
    """
    check_levels(c_bnd, levels)
    b = bmap.data
    if b.ndim != 5 or b.shape[1] != 1:
        raise ShapeError(f"importance tensor must be (batch, 1, t, h, w), got {b.shape}")
    q = quantize_importance(b[:, 0], levels)
    mask = np.moveaxis(mask_from_q(q, c_bnd, levels), 0, 1).astype(b.dtype)
    factor = np.moveaxis(mask_grad_factor(b[:, 0], c_bnd, levels), 0, 1).astype(b.dtype)

    def bw(g):
        return ((g * factor).sum(axis=1, keepdims=True),)

    return T._result(mask, (bmap,), bw)


def rate_loss(bmap: Tensor) -> Tensor:
    """Sum of importance values (the bit-count proxy)."""
    return T.sum(bmap)


def importance_forward(features: Tensor, params: dict[str, Tensor], prefix: str = "imp") -> Tensor:
    """Importance subnetwork: two 3x3x3 convs, a 1x1x1 conv to one channel, sigmoid."""
    h = T.leaky_relu(T.conv3d(features, params[f"{prefix}.c1.w"], params[f"{prefix}.c1.b"], padding=1))
    h = T.leaky_relu(T.conv3d(h, params[f"{prefix}.c2.w"], params[f"{prefix}.c2.b"], padding=1))
    logits = T.conv3d(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])
    return clamp_unit(T.sigmoid(logits))


def clamp_unit(x: Tensor) -> Tensor:
    """Clamp into [EPS, 1 - EPS]; the gradient passes through."""
    out = np.clip(x.data, EPS, 1 - EPS)
    return T._result(out, (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# serialization


@dataclass(frozen=True)
class PackedCode:
    prefix: np.ndarray  # quantized importance values, fixed width, big-endian
    payload: np.ndarray  # kept code bits per site

    @property
    def bits(self) -> np.ndarray:
        return np.concatenate([self.prefix, self.payload])

    @property
    def total_bits(self) -> int:
        return int(self.prefix.size + self.payload.size)


def uint_to_bits(values: np.ndarray, width: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    if width == 0:
        return np.zeros(0, np.uint8)
    shifts = np.arange(width - 1, -1, -1)
    return ((values[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)


def bits_to_uint(bits: np.ndarray, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(0, np.int64)
    b = np.asarray(bits, dtype=np.int64).reshape(-1, width)
    return (b << np.arange(width - 1, -1, -1)).sum(axis=1)


def _strip_batch(a: np.ndarray, rank: int) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == rank + 1 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != rank:
        raise ShapeError(f"expected rank {rank} (optionally with batch 1), got {a.shape}")
    return a


def pack_code(code, mask, q, levels: int) -> PackedCode:
    """Serialize a binary code of shape (c_bnd, t, h, w).

    For every site in (t, h, w) raster order the first ``(c_bnd/levels)*Q``
    channels are emitted, with -1 -> 0 and +1 -> 1.
    """
    code = _strip_batch(code.data if isinstance(code, Tensor) else code, 4)
    mask = _strip_batch(mask.data if isinstance(mask, Tensor) else mask, 4)
    q = np.asarray(q)
    if q.ndim == 5:
        q = q[0, 0]
    elif q.ndim == 4 and q.shape[0] == 1 and q.shape[1:] == code.shape[1:]:
        q = q[0]
    c_bnd = code.shape[0]
    check_levels(c_bnd, levels)
    if mask.shape != code.shape or q.shape != code.shape[1:]:
        raise ShapeError(f"code {code.shape}, mask {mask.shape} and Q {q.shape} disagree")
    if not np.array_equal(mask, mask_from_q(q, c_bnd, levels)):
        raise ShapeError("mask does not match the quantized importance map")
    site_major = np.moveaxis(code, 0, -1).reshape(-1, c_bnd)
    keep = np.moveaxis(mask, 0, -1).reshape(-1, c_bnd).astype(bool)
    payload = (site_major[keep] > 0).astype(np.uint8)
    return PackedCode(uint_to_bits(q, prefix_width(levels)), payload)


def unpack_code(bits: np.ndarray, dims: tuple[int, int, int], c_bnd: int, levels: int) -> np.ndarray:
    """Inverse of :func:`pack_code`: (c_bnd, t, h, w) with masked channels at 0."""
    check_levels(c_bnd, levels)
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    sites = int(np.prod(dims))
    pw = prefix_width(levels)
    if bits.size < sites * pw:
        raise TruncationError(f"importance prefix needs {sites * pw} bits, got {bits.size}")
    q = bits_to_uint(bits[: sites * pw], pw) if pw else np.zeros(sites, np.int64)
    if np.any(q >= levels):
        raise TruncationError("importance prefix holds values beyond the level count")
    kept = kept_channels(q, c_bnd, levels)
    expected = sites * pw + int(kept.sum())
    if bits.size != expected:
        raise TruncationError(f"code payload length mismatch: expected {expected} bits, got {bits.size}")
    keep = np.arange(c_bnd)[None, :] < kept[:, None]
    out = np.zeros((sites, c_bnd), np.float32)
    out[keep] = np.where(bits[sites * pw :] > 0, 1.0, -1.0)
    return np.moveaxis(out.reshape(*dims, c_bnd), -1, 0)


def transmitted_bits(q: np.ndarray, c_bnd: int, levels: int) -> int:
    """Closed-form bit count: sum over sites of prefix width plus kept channels."""
    q = np.asarray(q)
    return int(q.size * prefix_width(levels) + kept_channels(q, c_bnd, levels).sum())
