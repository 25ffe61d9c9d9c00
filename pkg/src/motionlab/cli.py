"""Command-line front end.

Every subcommand accepts the :class:`~motionlab.harness.RunConfig` fields as
flags (``--c-bnd 4``, ``--no-conditioned`` ...). ``--config FILE`` reads
``key = value`` lines first; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import types
import typing
from pathlib import Path

import numpy as np

from . import bitstream as bs
from . import harness as H
from .errors import ConfigError, MotionLabError, ShapeError
from .metrics import psnr, report_csv, ssim, write_text_atomic
from .synth import corpus
from .video import GopClip, load_y4m, save_y4m, yuv_to_rgb, Frame

COMMANDS = ("train", "encode", "decode", "bench", "rd-sweep", "metrics", "synth")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    hints = H.config_types()
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="key=value file supplying any of these flags")
    for f in dataclasses.fields(H.RunConfig):
        flag = "--" + f.name.replace("_", "-")
        hint = hints[f.name]
        optional = typing.get_origin(hint) in (typing.Union, types.UnionType)
        base = [a for a in typing.get_args(hint) if a is not type(None)][0] if optional else hint
        if base is bool:
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
        else:
            g.add_argument(flag, dest=f.name, type=base, default=argparse.SUPPRESS, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a learned motion codec on synthetic clips")
    p.add_argument("--log", help="CSV of per-step losses")
    _add_config_flags(p)

    p = sub.add_parser("encode", help="code each GOP of the input into a .dmc file")
    _add_config_flags(p)

    p = sub.add_parser("decode", help="rebuild frames from a .dmc file and the source I-frames")
    p.add_argument("--bitstream", required=True)
    _add_config_flags(p)

    p = sub.add_parser("bench", help="per-clip quality and rate report (CSV)")
    _add_config_flags(p)

    p = sub.add_parser("rd-sweep", help="one rate-distortion point per config file")
    p.add_argument("configs", nargs="*", help="key=value files, one per point")
    _add_config_flags(p)

    p = sub.add_parser("metrics", help="per-frame PSNR and SSIM between two y4m files")
    p.add_argument("--reference", required=True)
    p.add_argument("--distorted", required=True)
    p.add_argument("--output")

    p = sub.add_parser("synth", help="write one synthetic clip as y4m")
    p.add_argument("--frames", type=int, help="clip length (default: one GOP)")
    _add_config_flags(p)
    return parser


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> H.RunConfig:
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(H.parse_config_text(Path(args.config).read_text()))
    names = {f.name for f in dataclasses.fields(H.RunConfig)}
    values.update({k: v for k, v in vars(args).items() if k in names})
    return H.RunConfig(**values)


def _emit(text: str, output: str | None) -> None:
    if output:
        write_text_atomic(output, text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    cfg = resolve_config(args, {"codec": "learned"})
    if not cfg.checkpoint:
        raise ConfigError("train needs --checkpoint")

    def progress(step, row):
        if step % 24 == 0:
            print(f"step {step} lr {row['lr']:.3g} L_R {row['L_R']:.5f} total {row['total']:.5f}", file=sys.stderr)

    res = H.train_model(cfg, args.log, progress=progress)
    print(f"best epoch {res.best_epoch} validation loss {min(res.val_losses):.6f} -> {cfg.checkpoint}")
    return 0


def _encode_all(cfg: H.RunConfig) -> list[bs.CodedGop]:
    clips = H.load_clips(cfg)
    if cfg.codec == "block":
        return [H.encode_block(c, cfg)[0] for _, c in clips]
    model = H.load_checkpoint(cfg)
    return [H.encode_learned(c, model) for _, c in clips]


def cmd_encode(args) -> int:
    cfg = resolve_config(args)
    if not cfg.output:
        raise ConfigError("encode needs --output")
    gops = _encode_all(cfg)
    bs.write_dmc(cfg.output, gops)
    print(f"{len(gops)} GOPs, {sum(g.counted_bits for g in gops)} counted bits -> {cfg.output}")
    return 0


def cmd_decode(args) -> int:
    cfg = resolve_config(args)
    if not cfg.output:
        raise ConfigError("decode needs --output")
    gops = bs.read_dmc(args.bitstream)
    learned = [g.learned for g in gops]
    if any(learned) and not all(learned):
        raise ConfigError("mixed block and learned GOPs in one file")
    if gops and gops[0].learned:
        cfg = cfg.replace(codec="learned", kind="P" if gops[0].kind == "LEARNED_P" else "B")
    else:
        cfg = cfg.replace(codec="block")
    clips = H.load_clips(cfg)
    if len(clips) < len(gops):
        raise ShapeError(f"{len(gops)} GOPs but the source holds context for {len(clips)}")
    model = H.load_checkpoint(cfg) if cfg.codec == "learned" else None
    frames = []
    for gop, (_, clip) in zip(gops, clips):
        if gop.learned:
            idx = H.iframe_indices(cfg)
            recon = H.decode_learned(gop, [clip.frames[i] for i in idx], model)
        else:
            recon = H.decode_block(gop, clip.frames, cfg.chain)
        out = list(clip.frames[: cfg.gop_length])
        for i, f in zip(H.referencing_indices(cfg), recon):
            out[i] = f
        frames.extend(out)
    save_y4m(cfg.output, GopClip(tuple(frames)))
    print(f"{len(frames)} frames -> {cfg.output}")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    res = H.run_bench(cfg.replace(output=None))
    _emit(res.csv(), cfg.output)
    return 0


def cmd_rd_sweep(args) -> int:
    cli = {k: v for k, v in vars(args).items() if k in {f.name for f in dataclasses.fields(H.RunConfig)}}
    output = cli.pop("output", None)
    configs = []
    for path in args.configs:
        values = H.parse_config_text(Path(path).read_text())
        values.update(cli)
        values.pop("output", None)
        configs.append(H.RunConfig(**values))
    _emit(H.rd_sweep(configs), output)
    return 0


def _rgb_frames(path) -> list[Frame]:
    return [Frame(yuv_to_rgb(f.data), "rgb") if f.space == "yuv" else f for f in load_y4m(path).frames]


def cmd_metrics(args) -> int:
    ref, dist = _rgb_frames(args.reference), _rgb_frames(args.distorted)
    if len(ref) != len(dist):
        raise ShapeError(f"{len(ref)} reference frames against {len(dist)} distorted frames")
    rows = [{"frame": i, "psnr": psnr(a, b), "ssim": ssim(a, b)} for i, (a, b) in enumerate(zip(ref, dist))]
    if rows:
        rows.append({"frame": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows]))})
    _emit(report_csv(rows, ("frame", "psnr", "ssim")), args.output)
    return 0


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    if not cfg.output:
        raise ConfigError("synth needs --output")
    t = args.frames or cfg.gop_length
    clip, _ = corpus(cfg.synth, 1, cfg.seed, t=t, width=cfg.width, height=cfg.height, max_speed=cfg.max_speed)[0]
    save_y4m(cfg.output, clip)
    print(f"{cfg.synth} clip, {t} frames {cfg.width}x{cfg.height} -> {cfg.output}")
    return 0


HANDLERS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "rd-sweep": cmd_rd_sweep,
    "metrics": cmd_metrics,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except (MotionLabError, OSError) as exc:
        print(f"motionlab {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
