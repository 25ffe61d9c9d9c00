"""Small reverse-mode autodiff engine over dense numpy arrays.

Only the operators the motion networks need are provided. Every op returns a
new :class:`Tensor`; when any input requires gradients the output records a
backward closure and its parents. :func:`backward` walks the graph in reverse
topological order and accumulates gradients into ``.grad``.

Broadcasting is deliberately not supported beyond the per-channel bias of
:func:`conv3d`.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, FormatError, ShapeError, StateError, TruncationError

Triple = tuple[int, int, int]


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor in ``loss``'s graph that requires it."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a single-element loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward() already ran on this graph; run the forward pass again")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any tensor that requires gradients")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def mul_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Multiply by a fixed array of identical shape (no gradient to ``const``)."""
    const = np.asarray(const, dtype=x.dtype)
    if const.shape != x.shape:
        raise ShapeError(f"mul_const: shapes differ {x.shape} vs {const.shape}")
    return _result(x.data * const, (x,), lambda g: (g * const,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope)
    return _result(out, (x,), lambda g: (np.where(pos, g, g * slope),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = x.data.sum(dtype=np.float64).astype(x.dtype).reshape((1,) * x.data.ndim)
    return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    out = (x.data.sum(dtype=np.float64) / n).astype(x.dtype).reshape((1,) * x.data.ndim)
    return _result(out, (x,), lambda g: (np.full(shape, g.reshape(()) / n, dtype=x.dtype),))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error; ``target`` may be a plain array."""
    target = as_tensor(target)
    _same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size
    out = (np.square(diff, dtype=np.float64).sum() / n).astype(pred.dtype).reshape((1,) * diff.ndim)

    def bw(g):
        gd = (2.0 / n) * g.reshape(()) * diff
        return gd, -gd

    return _result(out, (pred, target), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
            i != axis and a != b for i, (a, b) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] outside axis {axis} of shape {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _result(x.data[idx].copy(), (x,), bw)


def tile_time(x: Tensor, n: int) -> Tensor:
    """Repeat a rank-5 tensor with a single time step ``n`` times along time."""
    if x.data.ndim != 5 or x.shape[2] != 1:
        raise ShapeError(f"tile_time needs time axis of length 1, got {x.shape}")
    out = np.repeat(x.data, n, axis=2)
    return _result(out, (x,), lambda g: (g.sum(axis=2, keepdims=True),))


def gather_pixels(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Spatial gather ``out[..., i, j] = x[..., rows[i, j], cols[i, j]]``.

    The index maps are shared across the leading axes. Used for block motion
    compensation inside a differentiable graph.
    """
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    h, w = x.shape[-2:]
    flat_idx = (rows * w + cols).reshape(-1)
    lead = x.shape[:-2]
    src = x.data.reshape(*lead, h * w)
    out = src[..., flat_idx].reshape(*lead, *rows.shape)

    def bw(g):
        acc = np.zeros((int(np.prod(lead)), h * w), dtype=g.dtype)
        gf = g.reshape(-1, flat_idx.size)
        for r in range(acc.shape[0]):
            acc[r] = np.bincount(flat_idx, weights=gf[r], minlength=h * w)
        return (acc.reshape(x.shape),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and pixel shuffle


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int or a 3-tuple, got {v}")
    return v  # type: ignore[return-value]


def conv_output_size(n: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    dilation=1,
    padding=0,
) -> Tensor:
    """3D cross-correlation over (time, height, width) with zero padding.

    ``x`` is (batch, in_ch, T, H, W) and ``weight`` is (out_ch, in_ch, kt, kh, kw).
    Implemented as im2col followed by one matrix product, so the reduction
    order is fixed for a given shape and never depends on scheduling.
    """
    st, dil, pad = _triple(stride), _triple(dilation), _triple(padding)
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d expects rank-5 input and weight, got {x.shape} and {weight.shape}")
    bsz, cin, *spatial = x.shape
    cout, wcin, *ksize = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d bias shape {bias.shape} does not match {cout} output channels")
    osz = [conv_output_size(n, k, s, d, p) for n, k, s, d, p in zip(spatial, ksize, st, dil, pad)]
    if min(osz) < 1:
        raise ShapeError(f"conv3d output would be empty: input {x.shape}, weight {weight.shape}")

    xp = x.data
    if any(pad):
        xp = np.pad(xp, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))
    xp = np.ascontiguousarray(xp)
    n_out = osz[0] * osz[1] * osz[2]
    n_taps = ksize[0] * ksize[1] * ksize[2]
    w = weight.data
    w2 = w.reshape(cout, cin * n_taps)

    # im2col: a strided view (batch, cin, kt, kh, kw, To, Ho, Wo) over the
    # padded input, copied once into (batch, cin * taps, positions)
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(bsz, cin, *ksize, *osz),
        strides=s[:2] + tuple(s[2 + i] * dil[i] for i in range(3)) + tuple(s[2 + i] * st[i] for i in range(3)),
        writeable=False,
    )
    cols = view.reshape(bsz, cin * n_taps, n_out)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(bsz, cout, *osz)

    parents = (x, weight) if bias is None else (x, weight, bias)
    offsets = list(itertools.product(*(range(k) for k in ksize)))

    def window(off):
        return tuple(
            slice(o * d, o * d + s_ * (n - 1) + 1, s_) for o, d, s_, n in zip(off, dil, st, osz)
        )

    def bw(g):
        g2 = g.reshape(bsz, cout, n_out)
        gw = None
        if weight.requires_grad:
            gw = np.zeros_like(w2)
            for b in range(bsz):
                gw += g2[b] @ cols[b].T
            gw = gw.reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(bsz, cin, n_taps, *osz)
            gxp = np.zeros(xp.shape, dtype=gcols.dtype)
            for i, off in enumerate(offsets):
                gxp[(slice(None), slice(None)) + window(off)] += gcols[:, :, i]
            t0, h0, w0 = pad
            gx = gxp[:, :, t0 : t0 + spatial[0], h0 : h0 + spatial[1], w0 : w0 + spatial[2]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return tuple(grads)

    return _result(out, parents, bw)


def pixel_shuffle3d(x: Tensor, r: int) -> Tensor:
    """Move channel blocks of size r**3 into an r-times finer (T, H, W) grid."""
    if x.data.ndim != 5:
        raise ShapeError(f"pixel_shuffle3d expects rank 5, got {x.shape}")
    b, c, t, h, w = x.shape
    if c % (r**3):
        raise ShapeError(f"pixel_shuffle3d: {c} channels not divisible by r^3={r**3}")
    co = c // r**3
    out = x.data.reshape(b, co, r, r, r, t, h, w).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    out = out.reshape(b, co, t * r, h * r, w * r)
    return _result(out, (x,), lambda g: (_unshuffle(g, r),))


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, c, t, h, w = a.shape
    out = a.reshape(b, c, t // r, r, h // r, r, w // r, r).transpose(0, 1, 3, 5, 7, 2, 4, 6)
    return out.reshape(b, c * r**3, t // r, h // r, w // r)


def pixel_unshuffle3d(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle3d`."""
    if x.data.ndim != 5 or any(n % r for n in x.shape[2:]):
        raise ShapeError(f"pixel_unshuffle3d: shape {x.shape} not divisible by r={r}")
    b, c, t, h, w = x.shape
    return _result(_unshuffle(x.data, r), (x,), lambda g: (pixel_shuffle3d(Tensor(g), r).data,))


# ---------------------------------------------------------------------------
# binarization


def stochastic_binarize(x: Tensor, mode: str = "train", rng_seed: int | None = 0) -> Tensor:
    """Map values in [-1, 1] to {-1, +1}.

    Training draws +1 with probability (1 + x) / 2 so the output is unbiased;
    evaluation takes the sign with sign(0) = +1. The gradient passes straight
    through unchanged.
    """
    d = x.data
    if np.any(d < -1.0) or np.any(d > 1.0) or np.any(np.isnan(d)):
        raise DomainError("stochastic_binarize input must lie in [-1, 1]")
    if mode == "train":
        u = np.random.default_rng(rng_seed).random(d.shape)
        out = np.where(u < (1.0 + d) / 2.0, 1.0, -1.0).astype(d.dtype)
    elif mode == "eval":
        out = np.where(d >= 0, 1.0, -1.0).astype(d.dtype)
    else:
        raise ValueError(f"unknown binarize mode {mode!r}")
    return _result(out, (x,), lambda g: (g,))


def straight_through(value: Tensor, surrogate: Tensor) -> Tensor:
    """Forward ``value``, backward as if the result were ``surrogate``."""
    _same_shape(value, surrogate, "straight_through")
    return _result(value.data.copy(), (surrogate,), lambda g: (g,))


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    for name, p in params.items():
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def step_lr(epoch: int, base_lr: float = 1e-4, milestones: Iterable[int] = (30, 100, 140), factor: float = 2.0) -> float:
    """Learning rate at ``epoch`` after dividing by ``factor`` at each milestone reached."""
    return base_lr / factor ** len([m for m in milestones if epoch >= m])


def scale_milestones(epochs: int, reference: Sequence[int] = (30, 100, 140), reference_epochs: int = 150) -> tuple[int, ...]:
    return tuple(max(1, round(m * epochs / reference_epochs)) for m in reference)


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``fn`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(np.asarray(a, np.float64) - b) / denom)


# ---------------------------------------------------------------------------
# checkpoint files

_MAGIC = b"MLAB"
_VERSION = 1


def save_params(path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write parameters in the MLAB checkpoint layout (little-endian float32)."""
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data if isinstance(p, Tensor) else p, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise FormatError(f"{path}: not an MLAB checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncationError(f"{path}: checkpoint truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return out
