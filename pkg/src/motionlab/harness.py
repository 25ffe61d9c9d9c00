"""Run configuration, codec drivers and benchmark orchestration.

Both codec paths share one report shape: every clip is coded as a single
GOP, the referencing frames are reconstructed from the bitstream plus the
uncompressed I-frame(s), and quality is measured on those frames only.
"""

from __future__ import annotations

import dataclasses
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import bitstream as bs
from . import dba, nets
from .blockmotion import ALGORITHMS, MotionField, block_search, dense_flow, motion_compensate
from .errors import ConfigError, ShapeError
from .metrics import QualityReport, bpp, flow_divergence, psnr, report_csv, ssim, write_text_atomic
from .parallel import parallel_map
from .synth import KINDS as SYNTH_KINDS
from .synth import corpus
from .tensor import Tensor
from .video import Frame, GopClip, load_y4m, load_yuv, yuv_to_rgb

CHAINS = ("decoded", "original")
CODECS = ("block", "learned")
SWEEP_COLUMNS = ("codec", "params", "bpp", "psnr", "ssim")


@dataclass
class RunConfig:
    # data
    input: str | None = None  # .y4m/.yuv path; synthetic clips when unset
    synth: str = "two_objects"
    clips: int = 4
    max_speed: int = 2
    seed: int = 0
    width: int = 64
    height: int = 64
    # codec
    codec: str = "block"
    algorithm: str = "ES"
    mb: int = 16
    p: int = 7
    mvd: bool = False
    chain: str = "decoded"
    checkpoint: str | None = None
    # model and training
    kind: str = "P"
    c_bnd: int = 8
    levels: int = 8
    dba: bool = False
    conditioned: bool = True
    multiscale: bool = True
    base_channels: int = 32
    lam: float = 0.0
    alpha: float | None = None
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 1
    train_clips: int = 24
    val_clips: int = 4
    # reporting
    margin: int = 0  # pixels excluded from each border when scoring
    timing: bool = False
    output: str | None = None

    def __post_init__(self):
        if self.codec not in CODECS:
            raise ConfigError(f"codec must be one of {CODECS}, got {self.codec!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown block algorithm {self.algorithm!r}")
        if self.chain not in CHAINS:
            raise ConfigError(f"chain must be one of {CHAINS}, got {self.chain!r}")
        if self.kind not in ("P", "B"):
            raise ConfigError(f"GOP kind must be P or B, got {self.kind!r}")
        if self.input is None and self.synth not in SYNTH_KINDS:
            raise ConfigError(f"unknown synthetic kind {self.synth!r}")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")

    @property
    def gop_length(self) -> int:
        return 18 if self.codec == "learned" and self.kind == "B" else 17

    def net_config(self) -> nets.NetConfig:
        return nets.NetConfig(
            c_bnd=self.c_bnd,
            base_channels=self.base_channels,
            kind=self.kind,
            multiscale=self.multiscale,
            dba=self.dba,
            quant_levels=self.levels,
            conditioned=self.conditioned,
        )

    def schedule(self) -> nets.TrainSchedule:
        return nets.TrainSchedule(
            epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, lam=self.lam, alpha=self.alpha, seed=self.seed
        )

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# key=value config files


def _coerce(name: str, raw: str, hint) -> object:
    raw = raw.strip()
    base = hint
    if typing.get_origin(hint) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("", "none"):
            return None
        base = args[0]
    if base is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return base(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot read {raw!r} as {base.__name__}") from exc


def config_types() -> dict[str, object]:
    return typing.get_type_hints(RunConfig)


def parse_config_text(text: str) -> dict[str, object]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    hints = config_types()
    out: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in hints:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, value, hints[key])
    return out


def load_config(path, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text())
    values.update(overrides)
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# data


def load_clips(cfg: RunConfig, seed: int | None = None, count: int | None = None) -> list[tuple[str, GopClip]]:
    """Named clips of ``cfg.gop_length`` frames: consecutive GOPs of the input, or synthetic ones."""
    n = cfg.gop_length
    seed = cfg.seed if seed is None else seed
    if cfg.input is None:
        count = cfg.clips if count is None else count
        clips = corpus(cfg.synth, count, seed, t=n, width=cfg.width, height=cfg.height, max_speed=cfg.max_speed)
        return [(f"{cfg.synth}:{seed}:{i}", c) for i, (c, _) in enumerate(clips)]
    path = Path(cfg.input)
    if path.suffix == ".y4m":
        video = load_y4m(path)
    elif path.suffix == ".yuv":
        video = load_yuv(path, cfg.width, cfg.height)
    else:
        raise ConfigError(f"unsupported input {path.name}; expected .y4m or .yuv")
    if len(video) < n:
        raise ShapeError(f"{path.name} has {len(video)} frames, one GOP needs {n}")
    # both codecs work on RGB, like the synthetic clips
    frames = [Frame(yuv_to_rgb(f.data), "rgb") if f.space == "yuv" else f for f in video.frames]
    out = []
    for g in range(len(frames) // n):
        out.append((f"{path.stem}:{g}", GopClip(tuple(frames[g * n : (g + 1) * n]), meta=dict(video.meta))))
    return out[:count] if count is not None else out


# ---------------------------------------------------------------------------
# block codec


def _block_predict(reference: Frame, target: Frame, cfg: RunConfig) -> tuple[MotionField, Frame]:
    f = block_search(reference, target, cfg.algorithm, cfg.mb, cfg.p)
    return f, motion_compensate(reference, f)


def encode_block(clip: GopClip, cfg: RunConfig) -> tuple[bs.CodedGop, list[Frame]]:
    """IPPP coding: each P-frame is searched against the previous frame.

    With ``chain == "decoded"`` that reference is the previous reconstruction
    (what a decoder has); ``"original"`` uses the previous source frame.
    Returns the coded GOP and the reconstructed P-frames.
    """
    frames = clip.frames[: cfg.gop_length]
    recon = [frames[0]]
    fields = []
    for k in range(1, len(frames)):
        ref = recon[k - 1] if cfg.chain == "decoded" else frames[k - 1]
        f, pred = _block_predict(ref, frames[k], cfg)
        fields.append(f)
        recon.append(pred)
    first = frames[0]
    gop = bs.block_gop(fields, first.width, first.height, 1, cfg.algorithm, cfg.mb, cfg.p, cfg.mvd)
    return gop, recon[1:]


def decode_block(gop: bs.CodedGop, context: Sequence[Frame], chain: str = "decoded") -> list[Frame]:
    """Rebuild the P-frames from the I-frame (``context[0]``).

    The ``"original"`` chain needs the source frames as ``context``; it exists
    to measure drift, not as a deployable decoder.
    """
    fields = bs.block_fields(gop)
    if chain == "original" and len(context) < len(fields):
        raise ShapeError("original-chain decoding needs every source frame as context")
    recon = [context[0]]
    for k, f in enumerate(fields, start=1):
        ref = recon[k - 1] if chain == "decoded" else context[k - 1]
        recon.append(motion_compensate(ref, f))
    return recon[1:]


# ---------------------------------------------------------------------------
# learned codec


@dataclass
class Model:
    cfg: nets.NetConfig
    params: nets.Params


def load_checkpoint(cfg: RunConfig) -> Model:
    if not cfg.checkpoint:
        raise ConfigError("the learned codec needs a checkpoint")
    net_cfg, params = nets.load_model(cfg.checkpoint)
    return Model(net_cfg, params)


def _learned_kind(cfg: nets.NetConfig) -> str:
    return "LEARNED_P" if cfg.kind == "P" else "LEARNED_B"


def encode_learned(clip: GopClip, model: Model) -> bs.CodedGop:
    cfg = model.cfg
    x, n, (h, w) = nets.prepare_clip(clip, cfg)
    enc = nets.encoder_forward(Tensor(x), model.params, cfg, "eval", 0)
    code = enc.code.data[0]
    k0, k1 = nets.referencing_range(cfg, n)
    n_ref = 1 if cfg.kind == "P" else 2
    if cfg.dba:
        q = dba.quantize_importance(enc.importance.data[0, 0], cfg.quant_levels)
        return bs.pack_learned(_learned_kind(cfg), w, h, n_ref, k1 - k0, code, q, cfg.quant_levels)
    return bs.pack_learned(_learned_kind(cfg), w, h, n_ref, k1 - k0, code)


def decode_learned(gop: bs.CodedGop, iframes: Sequence[Frame], model: Model) -> list[Frame]:
    """Reconstruct the referencing frames from the code and the I-frame context."""
    cfg = model.cfg
    if gop.kind != _learned_kind(cfg):
        raise ConfigError(f"bitstream holds {gop.kind}, the model is {cfg.kind}-kind")
    n = gop.n_ref + gop.n_pred
    blank = Frame(np.zeros((gop.height, gop.width, 3), np.uint8))
    frames = [blank] * n
    frames[0] = iframes[0]
    if cfg.kind == "B":
        frames[n - 1] = iframes[1]
    context = GopClip(tuple(frames))
    pred = nets.predict_clip(context, model.params, cfg, code=bs.learned_code(gop))
    return [Frame(f) for f in pred.frames]


def iframe_indices(cfg: RunConfig) -> list[int]:
    return [0] if cfg.codec == "block" or cfg.kind == "P" else [0, cfg.gop_length - 1]


def referencing_indices(cfg: RunConfig) -> range:
    return range(1, cfg.gop_length - (1 if cfg.codec == "learned" and cfg.kind == "B" else 0))


# ---------------------------------------------------------------------------
# benchmark


def _inner(frame: Frame, margin: int) -> np.ndarray:
    d = frame.to_uint8()
    if margin == 0:
        return d
    if 2 * margin >= min(d.shape[:2]):
        raise ConfigError(f"margin {margin} leaves nothing of a {d.shape[1]}x{d.shape[0]} frame")
    return d[margin:-margin, margin:-margin]


def flow_scores(originals: Sequence[Frame], recon: Sequence[Frame], p: int = 7) -> tuple[float, float]:
    """EPE and cosine divergence between dense flow of the source and of the reconstruction.

    ``originals[0]`` is the reference preceding the first reconstructed frame
    and is shared by both sequences.
    """
    seq = [originals[0]] + list(recon)
    gt = [dense_flow(a, b, p) for a, b in zip(originals[:-1], originals[1:])]
    pr = [dense_flow(a, b, p) for a, b in zip(seq[:-1], seq[1:])]
    return flow_divergence(gt, pr, "epe"), flow_divergence(gt, pr, "cosine")


def _param_string(cfg: RunConfig, model: Model | None) -> str:
    if cfg.codec == "block":
        return f"mb={cfg.mb} p={cfg.p} mvd={int(cfg.mvd)} chain={cfg.chain}"
    m = model.cfg
    levels = m.quant_levels if m.dba else 0
    return f"kind={m.kind} c_bnd={m.c_bnd} levels={levels} conditioned={int(m.conditioned)}"


@dataclass
class ClipResult:
    name: str
    gop: bs.CodedGop
    report: QualityReport
    recon: list[Frame]
    row: dict = field(default_factory=dict)


def bench_clip(name: str, clip: GopClip, cfg: RunConfig, model: Model | None = None) -> ClipResult:
    t0 = time.perf_counter()
    if cfg.codec == "block":
        gop, _ = encode_block(clip, cfg)
    else:
        gop = encode_learned(clip, model)
    t1 = time.perf_counter()
    if cfg.codec == "block":
        recon = decode_block(gop, clip.frames, cfg.chain)
    else:
        recon = decode_learned(gop, [clip.frames[i] for i in iframe_indices(cfg)], model)
    t2 = time.perf_counter()

    idx = list(referencing_indices(cfg))
    targets = [clip.frames[i] for i in idx]
    if len(recon) != len(targets):
        raise ShapeError(f"decoder returned {len(recon)} frames for {len(targets)} targets")
    report = QualityReport(
        psnr_frames=[psnr(_inner(t, cfg.margin), _inner(r, cfg.margin)) for t, r in zip(targets, recon)],
        ssim_frames=[ssim(_inner(t, cfg.margin), _inner(r, cfg.margin)) for t, r in zip(targets, recon)],
        bpp=bpp(gop),
        header_bits=8 * gop.header_bytes() + int(gop.overhead.size) + 32,
    )
    report.epe, report.cosine = flow_scores([clip.frames[idx[0] - 1]] + targets, recon, cfg.p)
    if cfg.timing:
        report.timings = {"encode": t1 - t0, "decode": t2 - t1}
    codec = cfg.algorithm if cfg.codec == "block" else gop.kind
    row = {
        "codec": codec,
        "params": f"{_param_string(cfg, model)} clip={name}",
        "bpp": report.bpp,
        "psnr": report.psnr,
        "ssim": report.ssim,
        "epe": report.epe,
        "cosine": report.cosine,
        "encode_s": report.timings.get("encode"),
        "decode_s": report.timings.get("decode"),
    }
    return ClipResult(name, gop, report, recon, row)


@dataclass
class BenchResult:
    cfg: RunConfig
    clips: list[ClipResult]

    @property
    def rows(self) -> list[dict]:
        return [c.row for c in self.clips]

    @property
    def reports(self) -> list[QualityReport]:
        return [c.report for c in self.clips]

    def csv(self) -> str:
        return report_csv(self.rows)

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows])) if self.clips else float("nan")


def run_bench(cfg: RunConfig, clips: Sequence[tuple[str, GopClip]] | None = None) -> BenchResult:
    """Code every clip, score the referencing frames and optionally write the CSV.

    Clips are processed in parallel; results keep clip order.
    """
    model = load_checkpoint(cfg) if cfg.codec == "learned" else None
    clips = load_clips(cfg) if clips is None else list(clips)
    results = parallel_map(lambda item: bench_clip(item[0], item[1], cfg, model), clips)
    out = BenchResult(cfg, results)
    if cfg.output:
        write_text_atomic(cfg.output, out.csv())
    return out


def rd_sweep(configs: Sequence[RunConfig], output: str | None = None) -> str:
    """One (bpp, psnr, ssim) row per config, averaged over its clips."""
    rows = []
    for cfg in configs:
        res = run_bench(cfg.replace(output=None))
        params = _param_string(cfg, load_checkpoint(cfg) if cfg.codec == "learned" else None)
        codec = cfg.algorithm if cfg.codec == "block" else res.clips[0].gop.kind if res.clips else cfg.codec
        rows.append({"codec": codec, "params": params, "bpp": res.mean("bpp"), "psnr": res.mean("psnr"), "ssim": res.mean("ssim")})
    text = report_csv(rows, SWEEP_COLUMNS)
    if output:
        write_text_atomic(output, text)
    return text


# ---------------------------------------------------------------------------
# training


def train_model(
    cfg: RunConfig,
    log_path: str | None = None,
    init: nets.Params | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> nets.TrainResult:
    """Train on synthetic clips (seed ``cfg.seed``) and validate on a disjoint set (seed + 1)."""
    net_cfg = cfg.net_config()
    data_cfg = cfg.replace(codec="learned", input=None)
    train_set = [c for _, c in load_clips(data_cfg, cfg.seed, cfg.train_clips)]
    val_set = [c for _, c in load_clips(data_cfg, cfg.seed + 1, cfg.val_clips)]
    return nets.train(
        train_set, net_cfg, cfg.schedule(), val_set, init=init, checkpoint=cfg.checkpoint, log_path=log_path, progress=progress
    )
