"""Learned motion codec: encoder, I-frame conditioning, decoder, losses, training.

A whole GOP (I-frames included) is squeezed by a factor of 8 along time,
height and width into ``c_bnd`` binary channels. The decoder expands the code
back with pixel shuffles, mixing in features computed from the I-frame(s) at
every resolution, and predicts the referencing frames.

``P`` models condition on the leading I-frame only. ``B`` models condition on
both ends of the GOP through two separately parameterized networks; their
features are blended along time with a linear ramp so frames near the end
lean on the trailing I-frame.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dba
from . import tensor as T
from .blockmotion import MotionField, compensation_indices, dense_flow
from .errors import ArityError, ConfigError, ShapeError, StateError
from .metrics import cosine_vectors, epe_vectors
from .tensor import Tensor
from .video import B_GOP, P_GOP, Frame, GopClip, normalize, pad_clip, structure_gop

FACTOR = 8
DILATIONS = ((1, 1, 1), (1, 2, 2), (1, 4, 4))


@dataclass(frozen=True)
class NetConfig:
    c_bnd: int = 8
    base_channels: int = 32
    levels: int = 3
    kind: str = "P"
    multiscale: bool = True
    dba: bool = False
    quant_levels: int = 8
    conditioned: bool = True

    def __post_init__(self):
        if self.levels != 3:
            raise ConfigError("the codec always uses 3 stride-2 stages (x8 per axis)")
        if self.c_bnd < 1:
            raise ConfigError(f"c_bnd must be >= 1, got {self.c_bnd}")
        if self.kind not in ("P", "B"):
            raise ConfigError(f"kind must be 'P' or 'B', got {self.kind!r}")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ConfigError("base_channels must be a positive multiple of 4")
        if self.dba:
            dba.check_levels(self.c_bnd, self.quant_levels)

    @property
    def widths(self) -> tuple[int, int, int]:
        """Feature widths at full, 1/2 and 1/4 resolution (encoder) and 1/8."""
        b = self.base_channels
        return (b // 4, b // 2, b)

    @property
    def gop_length(self) -> int:
        return 17 if self.kind == "P" else 18

    @property
    def gop_kind(self) -> str:
        return P_GOP if self.kind == "P" else B_GOP

    @property
    def n_iframes(self) -> int:
        return 1 if self.kind == "P" else 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        return cls(**json.loads(text))


Params = dict  # name -> Tensor


# ---------------------------------------------------------------------------
# parameters


def _conv_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    w1, w2, w3 = cfg.widths
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cout, cin, k):
        shapes[f"{name}.w"] = (cout, cin) + tuple(k)
        shapes[f"{name}.b"] = (cout,)

    def ms(name, width):
        if cfg.multiscale:
            for j, bw in enumerate(branch_widths(width)):
                conv(f"{name}.b{j}", bw, width, (3, 3, 3))
            conv(f"{name}.fuse", width, width, (1, 1, 1))
        else:
            conv(f"{name}.b0", width, width, (3, 3, 3))

    conv("enc.stem", w1, 3, (1, 1, 1))
    ms("enc.l0", w1)
    conv("enc.l0.down", w2, w1, (2, 2, 2))
    ms("enc.l1", w2)
    conv("enc.l1.down", w3, w2, (2, 2, 2))
    ms("enc.l2", w3)
    conv("enc.l2.down", w3, w3, (2, 2, 2))
    conv("enc.out", cfg.c_bnd, w3, (1, 1, 1))

    cond_nets = ("cond0",) if cfg.kind == "P" else ("cond0", "condt")
    if cfg.conditioned:
        for c in cond_nets:
            conv(f"{c}.skip", 3, 3, (1, 1, 1))
            conv(f"{c}.s0", w1, 3, (1, 3, 3))
            conv(f"{c}.d1", w2, w1, (1, 2, 2))
            conv(f"{c}.s1", w2, w2, (1, 3, 3))
            conv(f"{c}.d2", w3, w2, (1, 2, 2))
            conv(f"{c}.s2", w3, w3, (1, 3, 3))
            conv(f"{c}.d3", w3, w3, (1, 2, 2))
            conv(f"{c}.s3", w3, w3, (1, 3, 3))

    k = len(cond_nets)
    conv("dec.s3.conv", w3, cfg.c_bnd + k * w3, (3, 3, 3))
    conv("dec.s3.up", 8 * w2, w3, (1, 1, 1))
    conv("dec.s2.conv", w3, w2 + k * w3, (3, 3, 3))
    conv("dec.s2.up", 8 * w1, w3, (1, 1, 1))
    conv("dec.s1.conv", w2, w1 + k * w2, (3, 3, 3))
    conv("dec.s1.up", 8 * w1, w2, (1, 1, 1))
    conv("dec.final", 3, w1 + k * (3 + w1), (1, 3, 3))

    if cfg.dba:
        conv("imp.c1", w3, w3, (3, 3, 3))
        conv("imp.c2", w3, w3, (3, 3, 3))
        conv("imp.out", 1, w3, (1, 1, 1))
    return shapes


def branch_widths(width: int) -> tuple[int, int, int]:
    """Split ``width`` over three branches, remainder to the first."""
    third = width // 3
    return (width - 2 * third, third, third)


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> Params:
    """He-style initialization from a seeded generator, in sorted name order."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in sorted(_conv_shapes(cfg).items()):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    for name in params:
        if name.endswith(".skip.w"):
            # the pixel passthrough starts as an exact copy of the I-frame
            params[name].data[:] = np.eye(3, dtype=dtype).reshape(3, 3, 1, 1, 1)
    if cfg.dba:
        # start near "keep most channels" so early training matches the plain codec
        params["imp.out.b"].data[:] = math.log(0.9 / 0.1)
        params["imp.out.w"].data *= 0.1
    return params


def params_from_arrays(cfg: NetConfig, arrays: dict[str, np.ndarray], dtype=np.float32) -> Params:
    expected = _conv_shapes(cfg)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {missing[:5]}")
    out = {}
    for name, shape in sorted(expected.items()):
        a = np.asarray(arrays[name])
        if a.shape != shape:
            raise ShapeError(f"parameter {name}: checkpoint {a.shape}, config expects {shape}")
        out[name] = Tensor(a.astype(dtype), requires_grad=True, name=name)
    return out


def extend_params(cfg: NetConfig, base: Params, seed: int = 0) -> Params:
    """Fresh parameters for ``cfg`` with every matching tensor copied from ``base``."""
    fresh = init_params(cfg, seed)
    for name, p in fresh.items():
        if name in base and base[name].shape == p.shape:
            p.data = base[name].data.copy()
    return fresh


def save_model(path, cfg: NetConfig, params: Params) -> None:
    path = Path(path)
    T.save_params(path, params)
    side = path.with_name(path.name + ".json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(cfg.to_json())
    tmp.replace(side)


def load_model(path) -> tuple[NetConfig, Params]:
    path = Path(path)
    side = path.with_name(path.name + ".json")
    if not path.exists() or not side.exists():
        raise ConfigError(f"missing checkpoint {path} or its config {side}")
    cfg = NetConfig.from_json(side.read_text())
    return cfg, params_from_arrays(cfg, T.load_params(path))


# ---------------------------------------------------------------------------
# building blocks


def _conv(x: Tensor, params: Params, name: str, **kw) -> Tensor:
    return T.conv3d(x, params[f"{name}.w"], params[f"{name}.b"], **kw)


def multiscale_block(x: Tensor, params: Params, name: str, width: int | None = None, multiscale: bool = True) -> Tensor:
    """Parallel dilated 3x3x3 branches, concatenated and fused by a 1x1x1 conv.

    Each branch pads by its dilation so the (T, H, W) extent is preserved.
    With ``multiscale`` off a single undilated 3x3x3 conv is used instead.
    """
    if not multiscale:
        return T.leaky_relu(_conv(x, params, f"{name}.b0", padding=1))
    outs = []
    for j, dil in enumerate(DILATIONS):
        outs.append(_conv(x, params, f"{name}.b{j}", dilation=dil, padding=dil))
    h = T.leaky_relu(T.concat(outs, axis=1))
    out = T.leaky_relu(_conv(h, params, f"{name}.fuse"))
    if width is not None and out.shape[1] != width:
        raise ShapeError(f"{name} produced {out.shape[1]} channels, expected {width}")
    return out


def receptive_field(dilations: Sequence[int], kernel: int = 3) -> int:
    """Spatial extent covered by parallel branches with the given dilations."""
    return max(d * (kernel - 1) + 1 for d in dilations)


def clip_tensor(clip: GopClip) -> np.ndarray:
    """(1, 3, T, H, W) float array from a normalized clip."""
    if not clip.normalized:
        clip = normalize(clip)
    return np.ascontiguousarray(clip.array().transpose(3, 0, 1, 2)[None])


def _check_padded(shape) -> None:
    if len(shape) != 5 or any(n % FACTOR for n in shape[2:]):
        raise ShapeError(f"encoder input {tuple(shape)} must be rank 5 with T, H, W multiples of {FACTOR}")


@dataclass
class EncoderOutput:
    code: Tensor  # (B, c_bnd, t, h, w), masked when dba is on
    raw_code: Tensor
    importance: Tensor | None = None
    mask: Tensor | None = None

    @property
    def q(self) -> np.ndarray | None:
        if self.importance is None:
            return None
        return dba.quantize_importance(self.importance.data[:, 0], self._levels)

    _levels: int = 8


def encoder_forward(x: Tensor, params: Params, cfg: NetConfig, mode: str = "eval", seed: int | None = 0) -> EncoderOutput:
    _check_padded(x.shape)
    h = _conv(x, params, "enc.stem")
    for lvl in range(3):
        h = multiscale_block(h, params, f"enc.l{lvl}", multiscale=cfg.multiscale)
        h = T.leaky_relu(_conv(h, params, f"enc.l{lvl}.down", stride=2))
    # tanh sits right before the binarizer so its input lies in [-1, 1]
    soft = T.tanh(_conv(h, params, "enc.out"))
    code = T.stochastic_binarize(soft, mode, seed)
    if not cfg.dba:
        return EncoderOutput(code, code)
    bmap = dba.importance_forward(h, params)
    mask = dba.build_mask(bmap, cfg.c_bnd, cfg.quant_levels)
    return EncoderOutput(T.mul(code, mask), code, bmap, mask, cfg.quant_levels)


def encode_motion(clip: GopClip | np.ndarray, params: Params, cfg: NetConfig, mode: str = "eval", seed: int | None = 0) -> Tensor:
    """Binary motion code (1, c_bnd, T/8, H/8, W/8) for a padded GOP."""
    x = clip if isinstance(clip, np.ndarray) else clip_tensor(clip)
    return encoder_forward(Tensor(x), params, cfg, mode, seed).code


# ---------------------------------------------------------------------------
# conditioning


def _cond_net(iframe: Tensor, params: Params, prefix: str) -> list[Tensor]:
    f0 = T.leaky_relu(_conv(iframe, params, f"{prefix}.s0", padding=(0, 1, 1)))
    # the full-resolution level also carries the pixels (through a 1x1x1 conv
    # that starts as identity) so the decoder can copy them
    pyr = [T.concat([_conv(iframe, params, f"{prefix}.skip"), f0], axis=1)]
    h = f0
    for i in (1, 2, 3):
        h = T.leaky_relu(_conv(h, params, f"{prefix}.d{i}", stride=(1, 2, 2)))
        h = T.leaky_relu(_conv(h, params, f"{prefix}.s{i}", padding=(0, 1, 1)))
        pyr.append(h)
    return pyr


def _iframe_tensor(frame) -> Tensor:
    if isinstance(frame, Tensor):
        return frame
    if isinstance(frame, Frame):
        d = frame.data if frame.normalized else frame.data.astype(np.float32) / np.float32(127.5) - 1
        return Tensor(np.ascontiguousarray(d.transpose(2, 0, 1)[None, :, None]))
    a = np.asarray(frame, dtype=np.float32)
    if a.ndim == 5:
        return Tensor(a)
    raise ShapeError(f"cannot read an I-frame from shape {a.shape}")


def condition_features(iframes: Sequence, params: Params, cfg: NetConfig) -> list[list[Tensor]]:
    """One feature pyramid (full, 1/2, 1/4, 1/8 resolution) per I-frame.

    I-frames are Frames, (1, 3, 1, H, W) arrays or Tensors. The full
    resolution level stacks a pointwise map of the I-frame pixels (initially
    identity) with learned features.
    Unconditioned configs return all-zero pyramids of the same shapes.
    """
    iframes = list(iframes)
    if len(iframes) != cfg.n_iframes:
        raise ArityError(f"kind {cfg.kind} needs {cfg.n_iframes} I-frame(s), got {len(iframes)}")
    tensors = [_iframe_tensor(f) for f in iframes]
    for t in tensors:
        if t.shape[2] != 1 or t.shape[1] != 3:
            raise ShapeError(f"I-frame tensor must be (B, 3, 1, H, W), got {t.shape}")
        if t.shape[3] % FACTOR or t.shape[4] % FACTOR:
            raise ShapeError(f"I-frame size {t.shape[3:]} is not a multiple of {FACTOR}")
    if not cfg.conditioned:
        w1, w2, w3 = cfg.widths
        out = []
        for t in tensors:
            b, _, _, h, w = t.shape
            out.append([Tensor(np.zeros((b, c, 1, h >> i, w >> i), t.dtype)) for i, c in enumerate((3 + w1, w2, w3, w3))])
        return out
    prefixes = ("cond0",) if cfg.kind == "P" else ("cond0", "condt")
    return [_cond_net(t, params, p) for t, p in zip(tensors, prefixes)]


def time_ramp(steps: int, padded_t: int, gop_len: int) -> np.ndarray:
    """Blend weight of the trailing I-frame for each of ``steps`` time slots."""
    span = padded_t / steps
    centre = (np.arange(steps) + 0.5) * span - 0.5
    return np.clip(centre / (gop_len - 1), 0.0, 1.0)


def _stage_features(pyramids: list[list[Tensor]], level: int, steps: int, padded_t: int, cfg: NetConfig) -> list[Tensor]:
    feats = [T.tile_time(p[level], steps) for p in pyramids]
    if cfg.kind == "P":
        return feats
    tau = time_ramp(steps, padded_t, cfg.gop_length).reshape(1, 1, steps, 1, 1)
    f0, ft = feats
    w0 = np.broadcast_to(1.0 - tau, f0.shape).astype(f0.dtype)
    wt = np.broadcast_to(tau, ft.shape).astype(ft.dtype)
    return [T.mul_const(f0, w0), T.mul_const(ft, wt)]


def decode_frames(code: Tensor, pyramids: list[list[Tensor]], params: Params, cfg: NetConfig) -> Tensor:
    """Full padded GOP prediction (B, 3, T, H, W) in (-1, 1)."""
    if code.shape[1] != cfg.c_bnd:
        raise ShapeError(f"code has {code.shape[1]} channels, config expects {cfg.c_bnd}")
    padded_t = code.shape[2] * FACTOR
    h = code
    for stage, level in ((3, 3), (2, 2), (1, 1)):
        for p in pyramids:
            if p[level].shape[3:] != h.shape[3:]:
                raise ShapeError(
                    f"stage at 1/{2 ** level} has grid {h.shape[3:]}, conditioning gives {p[level].shape[3:]}"
                )
        cond = _stage_features(pyramids, level, h.shape[2], padded_t, cfg)
        h = T.leaky_relu(_conv(T.concat([h] + cond, axis=1), params, f"dec.s{stage}.conv", padding=1))
        h = T.leaky_relu(_conv(h, params, f"dec.s{stage}.up"))
        h = T.pixel_shuffle3d(h, 2)
    cond = _stage_features(pyramids, 0, h.shape[2], padded_t, cfg)
    return T.tanh(_conv(T.concat([h] + cond, axis=1), params, "dec.final", padding=(0, 1, 1)))


def iframe_slices(x: np.ndarray, cfg: NetConfig, gop_len: int | None = None) -> list[np.ndarray]:
    n = gop_len or cfg.gop_length
    first = x[:, :, 0:1]
    return [first] if cfg.kind == "P" else [first, x[:, :, n - 1 : n]]


def referencing_range(cfg: NetConfig, gop_len: int | None = None) -> tuple[int, int]:
    """Half-open frame range predicted by the codec (frames 1 .. 16 by default)."""
    n = gop_len or cfg.gop_length
    return (1, n) if cfg.kind == "P" else (1, n - 1)


@dataclass
class ForwardResult:
    pred: Tensor  # full padded GOP
    enc: EncoderOutput


def forward(x: np.ndarray, params: Params, cfg: NetConfig, mode: str = "eval", seed: int | None = 0, gop_len: int | None = None) -> ForwardResult:
    """Encode and decode a padded (B, 3, T, H, W) batch with ground-truth I-frames."""
    enc = encoder_forward(Tensor(x), params, cfg, mode, seed)
    pyramids = condition_features(iframe_slices(x, cfg, gop_len), params, cfg)
    return ForwardResult(decode_frames(enc.code, pyramids, params, cfg), enc)


# ---------------------------------------------------------------------------
# losses


def _crop(t: Tensor, frames: tuple[int, int], hw: tuple[int, int]) -> Tensor:
    out = T.slice_axis(t, 2, frames[0], frames[1])
    if out.shape[3] != hw[0]:
        out = T.slice_axis(out, 3, 0, hw[0])
    if out.shape[4] != hw[1]:
        out = T.slice_axis(out, 4, 0, hw[1])
    return out


def loss_reconstruction(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Mean squared error over every sample (callers crop padding first)."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"reconstruction loss needs equal shapes: {pred.shape} vs {target.shape}")
    return T.mse(pred, target)


def loss_flow(pred_flow, true_flow, kind: str = "epe") -> float:
    """EPE or cosine divergence over aligned fields, on width/height-normalized vectors."""
    pf = [pred_flow] if isinstance(pred_flow, MotionField) else list(pred_flow)
    tf = [true_flow] if isinstance(true_flow, MotionField) else list(true_flow)
    if len(pf) != len(tf):
        raise ShapeError(f"{len(pf)} predicted fields against {len(tf)} reference fields")
    for i, (a, b) in enumerate(zip(pf, tf)):
        if not a.same_geometry(b):
            raise ShapeError(f"field {i}: grid {a.grid} does not match {b.grid}")
    if not pf:
        return 0.0
    vp = np.concatenate([f.normalized_vectors().reshape(-1, 2) for f in pf])
    vg = np.concatenate([f.normalized_vectors().reshape(-1, 2) for f in tf])
    if kind == "epe":
        return epe_vectors(vg, vp)
    if kind == "cosine":
        return cosine_vectors(vg, vp)
    raise ValueError(f"unknown flow loss kind {kind!r}")


def _to_frame(a: np.ndarray) -> Frame:
    """(3, H, W) normalized array to an 8-bit frame."""
    return Frame(np.clip(np.rint((a.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8))


def sequence_flows(frames: np.ndarray, p: int = 7) -> list[MotionField]:
    """Dense block flow between consecutive frames of a (3, T, H, W) array."""
    fr = [_to_frame(frames[:, k]) for k in range(frames.shape[1])]
    return [dense_flow(a, b, p) for a, b in zip(fr[:-1], fr[1:])]


def flow_term(pred: Tensor, x: np.ndarray, frames: tuple[int, int], hw: tuple[int, int], kind: str = "epe", p: int = 7) -> tuple[Tensor, float]:
    """Flow-loss term and its value for batch item 0.

    The value is the divergence between dense block flow on the predicted
    frames and on the originals (frame ``frames[0]-1`` is the original
    reference). It reaches the network as a straight-through surrogate:
    the warping error of each predicted frame against the previous one
    displaced by the original flow, rescaled to carry the divergence value.
    """
    k0, k1 = frames
    h, w = hw
    pred_np = pred.data[0, :, k0:k1, :h, :w]
    tgt_np = x[0, :, k0 - 1 : k1, :h, :w]
    true = sequence_flows(tgt_np, p)
    seq = np.concatenate([tgt_np[:, :1], pred_np], axis=1)
    value = loss_flow(sequence_flows(seq, p), true, kind)

    first = Tensor(np.ascontiguousarray(x[:1, :, k0 - 1 : k0, :h, :w]))
    prev = first
    terms = []
    for i, fld in enumerate(true):
        cur = _crop(T.slice_axis(pred, 2, k0 + i, k0 + i + 1), (0, 1), hw)
        cur = T.slice_axis(cur, 0, 0, 1) if cur.shape[0] > 1 else cur
        rows, cols = compensation_indices(fld)
        terms.append(T.mse(cur, T.gather_pixels(prev, rows, cols)))
        prev = cur
    surrogate = terms[0]
    for t in terms[1:]:
        surrogate = T.add(surrogate, t)
    s = float(surrogate.item())
    if s <= 0:
        return T.scale(surrogate, 0.0), value
    return T.scale(surrogate, value / s), value


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 60
    lr: float = 1e-3
    milestones: tuple[int, ...] | None = None  # default: scaled from the reference schedule
    batch_size: int = 1
    lam: float = 0.0  # weight of the importance (rate) term
    alpha: float | None = None  # flow-loss weight; None disables, 0 means 1 / vector count
    flow_kind: str = "epe"
    flow_p: int = 7
    seed: int = 0
    validate_every: int = 1

    def lr_at(self, epoch: int) -> float:
        ms = self.milestones if self.milestones is not None else T.scale_milestones(self.epochs)
        return T.step_lr(epoch, self.lr, ms)


@dataclass
class TrainResult:
    cfg: NetConfig
    params: Params
    log: list[dict] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lr", "L_R", "L_B", "L_F", "total"])
        for r in self.log:
            w.writerow([r["step"], f"{r['lr']:.6g}", f"{r['L_R']:.8f}", f"{r['L_B']:.6f}", f"{r['L_F']:.8f}", f"{r['total']:.8f}"])
        return buf.getvalue()


def prepare_clip(clip: GopClip, cfg: NetConfig) -> tuple[np.ndarray, int, tuple[int, int]]:
    """Structure, pad and normalize one clip; returns (array, GOP length, (H, W))."""
    n = cfg.gop_length
    if len(clip) < n:
        raise ShapeError(f"clip has {len(clip)} frames, a {cfg.kind} GOP needs {n}")
    gop = structure_gop(clip.frames[:n], cfg.gop_kind)
    padded, dims = pad_clip(gop, FACTOR)
    return clip_tensor(padded), n, (dims[1], dims[2])


def step_losses(x: np.ndarray, params: Params, cfg: NetConfig, sched: TrainSchedule, mode: str, seed: int | None, hw: tuple[int, int]):
    res = forward(x, params, cfg, mode, seed)
    frames = referencing_range(cfg)
    tgt = Tensor(np.ascontiguousarray(x[:, :, frames[0] : frames[1], : hw[0], : hw[1]]))
    l_r = loss_reconstruction(_crop(res.pred, frames, hw), tgt)
    total = l_r
    l_b_val = 0.0
    if cfg.dba:
        # rate term averaged over the batch so it is a per-clip sum
        l_b = T.scale(dba.rate_loss(res.enc.importance), 1.0 / x.shape[0])
        l_b_val = l_b.item()
        if sched.lam:
            total = T.add(total, T.scale(l_b, sched.lam))
    l_f_val = 0.0
    if sched.alpha is not None:
        term, l_f_val = flow_term(res.pred, x, frames, hw, sched.flow_kind, sched.flow_p)
        alpha = sched.alpha
        if alpha == 0:
            gh = math.ceil(hw[0] / 4)
            gw = math.ceil(hw[1] / 4)
            alpha = 1.0 / (gh * gw * (frames[1] - frames[0]))
        # the divergence is a mean; alpha applies to the per-vector sum
        n_vec = math.ceil(hw[0] / 4) * math.ceil(hw[1] / 4) * (frames[1] - frames[0])
        total = T.add(total, T.scale(term, alpha * n_vec))
    return total, l_r.item(), l_b_val, l_f_val, res


def evaluate_loss(data: Sequence[np.ndarray], params: Params, cfg: NetConfig, hw: tuple[int, int]) -> float:
    """Mean eval-mode reconstruction loss over ``data``."""
    if not data:
        return float("nan")
    sched = TrainSchedule()
    vals = [step_losses(x, params, cfg, sched, "eval", 0, hw)[1] for x in data]
    return float(np.mean(vals))


def train(
    clips: Sequence[GopClip],
    cfg: NetConfig,
    sched: TrainSchedule,
    val_clips: Sequence[GopClip] = (),
    init: Params | None = None,
    checkpoint: str | Path | None = None,
    log_path: str | Path | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Adam training over ``clips`` in a fixed order.

    Batch composition and binarizer noise are derived from ``sched.seed`` and
    the step index, so a run is reproducible. The parameters with the lowest
    validation loss are kept (and written to ``checkpoint`` when given).
    """
    if not clips:
        raise ConfigError("training needs at least one clip")
    data = [prepare_clip(c, cfg) for c in clips]
    hw = data[0][2]
    if any(d[2] != hw for d in data):
        raise ShapeError("training clips must share one geometry")
    arrays = [d[0] for d in data]
    val = [prepare_clip(c, cfg)[0] for c in val_clips]
    params = init if init is not None else init_params(cfg, sched.seed)
    state = T.AdamState(lr=sched.lr)
    result = TrainResult(cfg, params)
    best = math.inf
    best_params = None
    step = 0
    bs = max(1, sched.batch_size)
    for epoch in range(sched.epochs):
        state.lr = sched.lr_at(epoch)
        order = np.random.default_rng([sched.seed, epoch]).permutation(len(arrays))
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            x = np.concatenate([arrays[i] for i in idx], axis=0)
            for p in params.values():
                p.zero_grad()
            total, l_r, l_b, l_f, _ = step_losses(x, params, cfg, sched, "train", _step_seed(sched.seed, step), hw)
            tv = total.item()
            if not math.isfinite(tv):
                raise StateError(f"loss became {tv} at step {step}")
            T.backward(total)
            T.adam_step(params, state)
            row = {"step": step, "lr": state.lr, "L_R": l_r, "L_B": l_b, "L_F": l_f, "total": tv}
            result.log.append(row)
            if progress:
                progress(step, row)
            step += 1
        if val and (epoch % sched.validate_every == 0 or epoch == sched.epochs - 1):
            v = evaluate_loss(val, params, cfg, hw)
            result.val_losses.append(v)
            if v < best:
                best = v
                result.best_epoch = epoch
                best_params = {k: p.data.copy() for k, p in params.items()}
                if checkpoint is not None:
                    save_model(checkpoint, cfg, params)
    if best_params is not None:
        for k, p in params.items():
            p.data = best_params[k]
    elif checkpoint is not None:
        save_model(checkpoint, cfg, params)
    if log_path is not None:
        path = Path(log_path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(result.log_csv())
        tmp.replace(path)
    return result


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.default_rng([seed, step, 7]).integers(0, 2**31))


# ---------------------------------------------------------------------------
# inference helpers


@dataclass
class Prediction:
    frames: np.ndarray  # (n_pred, H, W, 3) uint8
    code: np.ndarray  # (c_bnd, t, h, w) in {-1, 0, +1}
    q: np.ndarray | None  # quantized importance (t, h, w) when dba is on


def predict_clip(clip: GopClip, params: Params, cfg: NetConfig, code: np.ndarray | None = None) -> Prediction:
    """Eval-mode encode/decode of one clip; ``code`` overrides the encoder output."""
    x, n, hw = prepare_clip(clip, cfg)
    q = None
    if code is None:
        enc = encoder_forward(Tensor(x), params, cfg, "eval", 0)
        code_t = enc.code
        if cfg.dba:
            q = dba.quantize_importance(enc.importance.data[0, 0], cfg.quant_levels)
    else:
        code_t = Tensor(np.asarray(code, dtype=x.dtype)[None])
    pyramids = condition_features(iframe_slices(x, cfg, n), params, cfg)
    pred = decode_frames(code_t, pyramids, params, cfg)
    k0, k1 = referencing_range(cfg, n)
    out = pred.data[0, :, k0:k1, : hw[0], : hw[1]]
    frames = np.clip(np.rint((out.transpose(1, 2, 3, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return Prediction(frames, code_t.data[0], q)


def with_zero_conditioning(cfg: NetConfig, params: Params) -> Params:
    """Copy of ``params`` with every conditioning tensor zeroed."""
    out = {}
    for k, p in params.items():
        data = np.zeros_like(p.data) if k.startswith("cond") else p.data.copy()
        out[k] = Tensor(data, requires_grad=True, name=k)
    return out


def replace_cfg(cfg: NetConfig, **kw) -> NetConfig:
    return replace(cfg, **kw)
