"""Deterministic synthetic clips with known motion.

Every generator returns the clip and one per-pixel ground-truth
:class:`MotionField` (1x1 blocks) per transition ``k-1 -> k``, so the field
list is one shorter than the clip. Vectors follow the block-search
convention: a pixel at ``(x, y)`` in frame ``k`` came from ``(x - dx, y - dy)``
in frame ``k - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockmotion import MotionField
from .errors import ConfigError, SizeError
from .video import GopClip, clip_from_array

KINDS = ("static", "translate", "two_objects", "rotate")


@dataclass(frozen=True)
class SynthParams:
    velocity: tuple[int, int] = (3, -2)  # translate
    velocities: tuple[tuple[int, int], tuple[int, int]] = ((2, 0), (0, 2))  # two_objects
    object_size: int = 16
    angle: float = 0.02  # rotate, radians per frame
    p: int = 7  # search range the fixture must respect
    smooth: int = 5


def _blur(a: np.ndarray, k: int) -> np.ndarray:
    if k <= 1:
        return a
    ker = np.ones(k) / k
    for axis in (0, 1):
        a = np.apply_along_axis(lambda v: np.convolve(np.pad(v, (k // 2, k - 1 - k // 2), mode="wrap"), ker, "valid"), axis, a)
    return a


def texture(rng: np.random.Generator, h: int, w: int, smooth: int = 5, tint=None) -> np.ndarray:
    """Smooth random colour texture in [0, 255], shape (h, w, 3)."""
    base = rng.random((h, w, 3))
    detail = np.stack([_blur(base[..., c], smooth) for c in range(3)], axis=-1)
    detail = (detail - detail.min()) / max(np.ptp(detail), 1e-9)
    tint = rng.random(3) if tint is None else np.asarray(tint)
    return np.clip(255.0 * (0.1 + 0.4 * detail + 0.3 * tint), 0, 255)


def _check_velocity(v, p: int) -> None:
    if max(abs(v[0]), abs(v[1])) > p:
        raise ConfigError(f"velocity {tuple(v)} exceeds the search range p={p}")


def _fields(vectors: list[np.ndarray], w: int, h: int) -> list[MotionField]:
    return [MotionField(1, 1, w, h, v) for v in vectors]


def synth_clip(kind: str, t: int = 17, width: int = 64, height: int = 64, params: SynthParams | None = None, seed: int = 0):
    """Generate ``(clip, fields)`` for one of ``KINDS``."""
    params = params or SynthParams()
    if min(width, height) < 16:
        raise SizeError(f"synthetic clips need at least 16x16 frames, got {width}x{height}")
    if t < 1:
        raise SizeError("clip needs at least one frame")
    rng = np.random.default_rng(seed)
    zero = np.zeros((height, width, 2), np.int64)

    if kind == "static":
        img = texture(rng, height, width, params.smooth)
        frames = np.repeat(img[None], t, axis=0)
        vecs = [zero] * (t - 1)
        meta = {}
    elif kind == "translate":
        dx, dy = params.velocity
        _check_velocity(params.velocity, params.p)
        mx, my = abs(dx) * (t - 1), abs(dy) * (t - 1)
        big = texture(rng, height + my, width + mx, params.smooth)
        ox0 = mx if dx > 0 else 0
        oy0 = my if dy > 0 else 0
        frames = np.stack(
            [big[oy0 - k * dy : oy0 - k * dy + height, ox0 - k * dx : ox0 - k * dx + width] for k in range(t)]
        )
        v = zero.copy()
        v[..., 0], v[..., 1] = dx, dy
        vecs = [v] * (t - 1)
        meta = {}
    elif kind == "two_objects":
        frames, vecs = _two_objects(rng, t, width, height, params)
        meta = {}
    elif kind == "rotate":
        frames, vecs = _rotate(rng, t, width, height, params)
        meta = {"approximate_flow": True}
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")

    arr = np.clip(np.rint(frames), 0, 255).astype(np.uint8)
    clip = clip_from_array(arr, "rgb", meta={"synth": kind, "seed": seed, **meta})
    return clip, _fields(vecs, width, height)


def _two_objects(rng, t, width, height, params: SynthParams):
    size = params.object_size
    for v in params.velocities:
        _check_velocity(v, params.p)
    bg = texture(rng, height, width, params.smooth)
    objs = []
    for v in params.velocities:
        tex = texture(rng, size, size, max(1, params.smooth // 2))
        tex = np.clip(255 - tex * 0.9, 0, 255)  # inverted palette keeps objects distinct from the background
        travel = [abs(v[0]) * (t - 1), abs(v[1]) * (t - 1)]
        if size + travel[0] > width or size + travel[1] > height:
            raise ConfigError(f"object with velocity {v} leaves a {width}x{height} frame within {t} frames")
        lo_x = travel[0] if v[0] < 0 else 0
        lo_y = travel[1] if v[1] < 0 else 0
        x0 = lo_x + int(rng.integers(0, width - size - travel[0] + 1))
        y0 = lo_y + int(rng.integers(0, height - size - travel[1] + 1))
        objs.append((tex, v, x0, y0))

    frames, owners = [], []
    for k in range(t):
        img = bg.copy()
        owner = np.full((height, width), -1)
        for i, (tex, v, x0, y0) in enumerate(objs):
            x, y = x0 + k * v[0], y0 + k * v[1]
            img[y : y + size, x : x + size] = tex
            owner[y : y + size, x : x + size] = i
        frames.append(img)
        owners.append(owner)
    vecs = []
    for k in range(1, t):
        f = np.zeros((height, width, 2), np.int64)
        for i, (_, v, _, _) in enumerate(objs):
            f[owners[k] == i] = v
        vecs.append(f)
    return np.stack(frames), vecs


def _rotate(rng, t, width, height, params: SynthParams):
    side = int(np.ceil(np.hypot(width, height))) + 4
    tex = texture(rng, side, side, params.smooth)
    cy, cx = (height - 1) / 2, (width - 1) / 2
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ry, rx = yy - cy, xx - cx

    def render(theta):
        c, s = np.cos(theta), np.sin(theta)
        sx = c * rx + s * ry + (side - 1) / 2
        sy = -s * rx + c * ry + (side - 1) / 2
        x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
        fx, fy = (sx - x0)[..., None], (sy - y0)[..., None]
        return (
            tex[y0, x0] * (1 - fx) * (1 - fy)
            + tex[y0, x0 + 1] * fx * (1 - fy)
            + tex[y0 + 1, x0] * (1 - fx) * fy
            + tex[y0 + 1, x0 + 1] * fx * fy
        )

    a = params.angle
    # frame k shows tex(R(-k a) r), so pixel r came from R(-a) r one frame
    # earlier; the displacement r - R(-a) r is rounded to integers
    c, s = np.cos(a), np.sin(a)
    v = np.stack([rx - (c * rx + s * ry), ry - (-s * rx + c * ry)], axis=-1)
    v = np.rint(v).astype(np.int64)
    if np.abs(v).max() > params.p:
        raise ConfigError(f"rotation of {a} rad per frame exceeds the search range p={params.p}")
    frames = np.stack([render(k * a) for k in range(t)])
    return frames, [v] * (t - 1)


def corpus(kind: str, count: int, seed: int, t: int = 17, width: int = 64, height: int = 64, max_speed: int = 2):
    """``count`` clips with per-clip random velocities drawn from ``[-max_speed, max_speed]``."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        clip_seed = int(rng.integers(0, 2**31))
        if kind == "two_objects":
            vs = rng.integers(-max_speed, max_speed + 1, size=(2, 2))
            params = SynthParams(velocities=(tuple(int(x) for x in vs[0]), tuple(int(x) for x in vs[1])))
        elif kind == "translate":
            v = rng.integers(-max_speed, max_speed + 1, size=2)
            params = SynthParams(velocity=(int(v[0]), int(v[1])))
        else:
            params = SynthParams()
        out.append(synth_clip(kind, t, width, height, params, clip_seed))
    return out
