"""Block-matching motion estimation and compensation.

Vector convention: a vector ``(dx, dy)`` on a target block at ``(x0, y0)``
says the block's content sat at ``(x0 - dx, y0 - dy)`` in the reference
frame, i.e. the vector is the block's velocity from reference to target.

Matching cost is the sum of absolute differences (SAD) on 8-bit luma.
Frames whose size is not a multiple of the block size are padded on the
right/bottom by edge replication. Candidates whose reference block leaves the
padded frame are skipped. Ties go to the smaller ``|dx| + |dy|``, then to
raster order of ``(dy, dx)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError, SizeError
from .parallel import parallel_map
from .video import Frame

ALGORITHMS = ("ES", "TSS", "NTSS", "SES", "FSS", "DS", "ARPS")

_LDSP = ((0, 0), (2, 0), (-2, 0), (0, 2), (0, -2), (1, 1), (1, -1), (-1, 1), (-1, -1))
_SDSP = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))
_RING1 = tuple((i, j) for j in (-1, 0, 1) for i in (-1, 0, 1))


@dataclass(frozen=True, eq=False)
class MotionField:
    """Per-block displacement vectors for one frame transition."""

    block_w: int
    block_h: int
    width: int
    height: int
    vectors: np.ndarray  # (grid_h, grid_w, 2) int, (dx, dy)
    costs: np.ndarray | None = None
    eval_counts: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.int64)
        if v.shape != self.grid + (2,):
            raise ShapeError(f"vectors {v.shape} do not fit grid {self.grid}")
        object.__setattr__(self, "vectors", v)

    @property
    def grid(self) -> tuple[int, int]:
        return (math.ceil(self.height / self.block_h), math.ceil(self.width / self.block_w))

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Target block centres (cx, cy), each shaped like the grid."""
        gh, gw = self.grid
        cy, cx = np.meshgrid(
            np.arange(gh) * self.block_h + self.block_h // 2,
            np.arange(gw) * self.block_w + self.block_w // 2,
            indexing="ij",
        )
        return cx, cy

    def normalized_vectors(self) -> np.ndarray:
        """Vectors with x divided by frame width and y by frame height."""
        return self.vectors / np.array([self.width, self.height], dtype=np.float64)

    @classmethod
    def zeros(cls, width: int, height: int, block: int) -> "MotionField":
        gh, gw = math.ceil(height / block), math.ceil(width / block)
        return cls(block, block, width, height, np.zeros((gh, gw, 2), np.int64))

    def same_geometry(self, other: "MotionField") -> bool:
        return (self.block_w, self.block_h, self.width, self.height) == (
            other.block_w,
            other.block_h,
            other.width,
            other.height,
        )

    def __eq__(self, other):
        if not isinstance(other, MotionField):
            return NotImplemented
        return self.same_geometry(other) and np.array_equal(self.vectors, other.vectors)


def luma_plane(x) -> np.ndarray:
    if isinstance(x, Frame):
        return x.luma().astype(np.int64)
    a = np.asarray(x)
    if a.ndim == 3:
        return Frame(a).luma().astype(np.int64)
    if a.ndim != 2:
        raise ShapeError(f"expected a Frame or a 2D luma plane, got shape {a.shape}")
    return a.astype(np.int64)


def _pad_to(plane: np.ndarray, mb: int) -> np.ndarray:
    h, w = plane.shape
    hp, wp = math.ceil(h / mb) * mb, math.ceil(w / mb) * mb
    if (hp, wp) == (h, w):
        return plane
    return np.pad(plane, ((0, hp - h), (0, wp - w)), mode="edge")


def _key(cost: int, v: tuple[int, int]):
    return (cost, abs(v[0]) + abs(v[1]), v[1], v[0])


class _Block:
    """Lazy, memoized SAD evaluation for one target block."""

    __slots__ = ("tgt", "ref", "y0", "x0", "mb", "p", "hp", "wp", "cache")

    def __init__(self, tgt, ref, y0, x0, mb, p):
        self.tgt = tgt[y0 : y0 + mb, x0 : x0 + mb]
        self.ref = ref
        self.y0, self.x0, self.mb, self.p = y0, x0, mb, p
        self.hp, self.wp = ref.shape
        self.cache: dict[tuple[int, int], int] = {}

    def cost(self, v: tuple[int, int]) -> int | None:
        dx, dy = v
        if abs(dx) > self.p or abs(dy) > self.p:
            return None
        ry, rx = self.y0 - dy, self.x0 - dx
        if ry < 0 or rx < 0 or ry + self.mb > self.hp or rx + self.mb > self.wp:
            return None
        c = self.cache.get(v)
        if c is None:
            c = int(np.abs(self.tgt - self.ref[ry : ry + self.mb, rx : rx + self.mb]).sum())
            self.cache[v] = c
        return c

    def best(self, candidates, current: tuple[int, int]) -> tuple[int, int]:
        best_v, best_k = current, _key(self.cost(current), current)
        for v in candidates:
            c = self.cost(v)
            if c is None:
                continue
            k = _key(c, v)
            if k < best_k:
                best_v, best_k = v, k
        return best_v


def _around(c, pattern, s=1):
    return [(c[0] + i * s, c[1] + j * s) for i, j in pattern]


def _first_step(p: int) -> int:
    return 2 ** (math.ceil(math.log2(p + 1)) - 1)


def _tss(blk: _Block, c=(0, 0), s=None) -> tuple[int, int]:
    s = _first_step(blk.p) if s is None else s
    while s >= 1:
        c = blk.best(_around(c, _RING1, s), c)
        s //= 2
    return c


def _ntss(blk: _Block) -> tuple[int, int]:
    s = _first_step(blk.p)
    origin = (0, 0)
    c = blk.best(_around(origin, _RING1, s) + _around(origin, _RING1, 1), origin)
    if c == origin:
        return c
    if max(abs(c[0]), abs(c[1])) == 1:
        return blk.best(_around(c, _RING1), c)
    return _tss(blk, c, s // 2)


def _ses(blk: _Block) -> tuple[int, int]:
    inf = float("inf")
    c = (0, 0)
    s = _first_step(blk.p)
    while s >= 1:
        a = blk.cost(c)
        right, down = (c[0] + s, c[1]), (c[0], c[1] + s)
        cb, cc = blk.cost(right), blk.cost(down)
        sx = 1 if a >= (inf if cb is None else cb) else -1
        sy = 1 if a >= (inf if cc is None else cc) else -1
        cands = [right, down, (c[0] + sx * s, c[1]), (c[0], c[1] + sy * s), (c[0] + sx * s, c[1] + sy * s)]
        c = blk.best(cands, c)
        s //= 2
    return c


def _fss(blk: _Block) -> tuple[int, int]:
    c = (0, 0)
    for _ in range(3):
        nxt = blk.best(_around(c, _RING1, 2), c)
        if nxt == c:
            break
        c = nxt
    return blk.best(_around(c, _RING1), c)


def _ds(blk: _Block) -> tuple[int, int]:
    c = (0, 0)
    while True:
        nxt = blk.best(_around(c, _LDSP), c)
        if nxt == c:
            break
        c = nxt
    return blk.best(_around(c, _SDSP), c)


def _arps(blk: _Block, predicted: tuple[int, int] | None, zmp_threshold: int = 0) -> tuple[int, int]:
    origin = (0, 0)
    if blk.cost(origin) <= zmp_threshold:
        return origin
    if predicted is None:
        arm = 2
        cands = []
    else:
        arm = max(abs(predicted[0]), abs(predicted[1]))
        cands = [predicted]
    if arm:
        cands = [(arm, 0), (-arm, 0), (0, arm), (0, -arm)] + cands
    c = blk.best(cands, origin)
    while True:
        nxt = blk.best(_around(c, _SDSP), c)
        if nxt == c:
            return c
        c = nxt


_FAST: dict[str, Callable] = {"TSS": _tss, "NTSS": _ntss, "SES": _ses, "FSS": _fss, "DS": _ds}


def _es(tgt: np.ndarray, ref: np.ndarray, mb: int, p: int):
    hp, wp = tgt.shape
    gh, gw = hp // mb, wp // mb
    offsets = sorted(
        ((dx, dy) for dy in range(-p, p + 1) for dx in range(-p, p + 1)),
        key=lambda v: (abs(v[0]) + abs(v[1]), v[1], v[0]),
    )
    ref_pad = np.pad(ref, p, mode="edge")
    y0 = np.arange(gh)[:, None] * mb
    x0 = np.arange(gw)[None, :] * mb
    big = np.iinfo(np.int64).max
    costs = np.full((len(offsets), gh, gw), big, dtype=np.int64)
    for k, (dx, dy) in enumerate(offsets):
        valid = (y0 - dy >= 0) & (y0 - dy + mb <= hp) & (x0 - dx >= 0) & (x0 - dx + mb <= wp)
        if not valid.any():
            continue
        shifted = ref_pad[p - dy : p - dy + hp, p - dx : p - dx + wp]
        sad = np.abs(tgt - shifted).reshape(gh, mb, gw, mb).sum(axis=(1, 3))
        costs[k] = np.where(valid, sad, big)
    best = np.argmin(costs, axis=0)
    table = np.array(offsets, dtype=np.int64)
    vectors = table[best]
    best_cost = np.take_along_axis(costs, best[None], axis=0)[0]
    counts = (costs != big).sum(axis=0)
    return vectors, best_cost, counts


def block_search(reference, target, algorithm: str = "ES", mb: int = 16, p: int = 7, zmp_threshold: int = 0) -> MotionField:
    """Estimate one motion vector per ``mb`` x ``mb`` block of ``target``."""
    algorithm = algorithm.upper()
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    if p < 1:
        raise ValueError("search range p must be >= 1")
    ref = luma_plane(reference)
    tgt = luma_plane(target)
    if ref.shape != tgt.shape:
        raise ShapeError(f"reference {ref.shape} and target {tgt.shape} differ")
    h, w = tgt.shape
    if mb > h or mb > w:
        raise SizeError(f"block size {mb} exceeds frame {w}x{h}")
    ref_p, tgt_p = _pad_to(ref, mb), _pad_to(tgt, mb)
    if algorithm == "ES":
        vectors, costs, counts = _es(tgt_p, ref_p, mb, p)
        return MotionField(mb, mb, w, h, vectors, costs, counts)

    gh, gw = tgt_p.shape[0] // mb, tgt_p.shape[1] // mb

    def search_row(by: int):
        row_v = np.zeros((gw, 2), np.int64)
        row_c = np.zeros(gw, np.int64)
        row_n = np.zeros(gw, np.int64)
        pred = None
        for bx in range(gw):
            blk = _Block(tgt_p, ref_p, by * mb, bx * mb, mb, p)
            if algorithm == "ARPS":
                v = _arps(blk, pred, zmp_threshold)
                pred = v
            else:
                v = _FAST[algorithm](blk)
            row_v[bx] = v
            row_c[bx] = blk.cost(v)
            row_n[bx] = len(blk.cache)
        return row_v, row_c, row_n

    rows = parallel_map(search_row, range(gh))
    vectors = np.stack([r[0] for r in rows])
    costs = np.stack([r[1] for r in rows])
    counts = np.stack([r[2] for r in rows])
    return MotionField(mb, mb, w, h, vectors, costs, counts)


def compensation_indices(field: MotionField) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (row, col) source maps implementing block compensation."""
    mb_h, mb_w = field.block_h, field.block_w
    h, w = field.height, field.width
    gh, gw = field.grid
    hp, wp = gh * mb_h, gw * mb_w
    sx = np.clip(np.arange(gw)[None, :] * mb_w - field.vectors[:, :, 0], 0, wp - mb_w)
    sy = np.clip(np.arange(gh)[:, None] * mb_h - field.vectors[:, :, 1], 0, hp - mb_h)
    yy = np.arange(h)
    xx = np.arange(w)
    by, bx = yy // mb_h, xx // mb_w
    rows = sy[by[:, None], bx[None, :]] + (yy % mb_h)[:, None]
    cols = sx[by[:, None], bx[None, :]] + (xx % mb_w)[None, :]
    return np.minimum(rows, h - 1), np.minimum(cols, w - 1)


def motion_compensate(reference: Frame, field: MotionField) -> Frame:
    """Predict the target by copying each block from its displaced source."""
    if (reference.width, reference.height) != (field.width, field.height):
        raise ShapeError(
            f"field is for {field.width}x{field.height}, frame is {reference.width}x{reference.height}"
        )
    rows, cols = compensation_indices(field)
    return Frame(reference.data[rows, cols], reference.space)


def dense_flow(prev, nxt, p: int = 7) -> MotionField:
    """Fine-grained flow proxy: exhaustive search on 4x4 blocks."""
    return block_search(prev, nxt, "ES", mb=4, p=p)


def residual_energy(target, prediction) -> int:
    """L1 residual: sum of absolute luma differences, the criterion the search minimizes."""
    return int(np.abs(luma_plane(target) - luma_plane(prediction)).sum())
