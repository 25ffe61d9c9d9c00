"""Desk-scale training recipes and the evaluations run on the trained models.

Each recipe is a :class:`RunConfig` plus an optional parent whose weights
seed the run. Trained checkpoints are cached under ``MOTIONLAB_CACHE``
(default ``.cache/models``), keyed by a hash of the recipe chain, so a
second run of the acceptance suite only evaluates.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import harness as H
from . import nets
from .metrics import bpp, psnr
from .synth import corpus
from .video import Frame

CACHE_ENV = "MOTIONLAB_CACHE"
HELDOUT_SEED = 100
HELDOUT_CLIPS = 8

_COND = dict(codec="learned", synth="two_objects", c_bnd=4, epochs=10, train_clips=24, val_clips=4)
_RATE = dict(codec="learned", synth="two_objects", c_bnd=8, levels=8, train_clips=24, val_clips=4)
_FLOW = dict(codec="learned", synth="translate", c_bnd=4, train_clips=24, val_clips=4)


@dataclass(frozen=True)
class Recipe:
    name: str
    cfg: H.RunConfig
    parent: str | None = None


RECIPES = {
    r.name: r
    for r in (
        Recipe("cond_none", H.RunConfig(**_COND, kind="P", conditioned=False)),
        Recipe("cond_p", H.RunConfig(**_COND, kind="P")),
        Recipe("cond_b", H.RunConfig(**_COND, kind="B")),
        Recipe("rate_base", H.RunConfig(**_RATE, epochs=8)),
        Recipe("rate_lam0", H.RunConfig(**_RATE, epochs=4, dba=True, lam=0.0), "rate_base"),
        Recipe("rate_lam", H.RunConfig(**_RATE, epochs=4, dba=True, lam=1e-4), "rate_base"),
        # rate weight on the scale of the per-site reconstruction gradient
        Recipe("rate_local", H.RunConfig(**_RATE, epochs=12, dba=True, lam=1e-5), "rate_base"),
        Recipe("flow_base", H.RunConfig(**_FLOW, epochs=6)),
        Recipe("flow_off", H.RunConfig(**_FLOW, epochs=3), "flow_base"),
        Recipe("flow_on", H.RunConfig(**_FLOW, epochs=3, alpha=0.0), "flow_base"),
    )
}


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, ".cache/models"))


def recipe_key(name: str) -> str:
    r = RECIPES[name]
    body = {k: v for k, v in dataclasses.asdict(r.cfg).items() if k not in ("checkpoint", "output")}
    body["parent"] = recipe_key(r.parent) if r.parent else None
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


def checkpoint_path(name: str) -> Path:
    return cache_dir() / f"{name}-{recipe_key(name)}.mlab"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def ensure_model(name: str, verbose: bool = True) -> H.Model:
    """Load the cached checkpoint for ``name``, training it (and its parent) first if needed."""
    path = checkpoint_path(name)
    r = RECIPES[name]
    cfg = r.cfg.replace(checkpoint=str(path))
    if not (path.exists() and path.with_name(path.name + ".json").exists()):
        init = None
        if r.parent:
            base = ensure_model(r.parent, verbose)
            init = nets.extend_params(cfg.net_config(), base.params, seed=cfg.seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        start = time.time()

        def progress(step, row):
            if verbose and step % 48 == 0:
                _log(f"[{name}] step {step} L_R {row['L_R']:.5f} total {row['total']:.5f} ({time.time() - start:.0f}s)")

        # the checkpoint only appears once training has finished, so an
        # interrupted run is never mistaken for a cached model
        res = H.train_model(cfg.replace(checkpoint=None), str(path.with_suffix(".csv")), init=init, progress=progress)
        nets.save_model(path, res.cfg, res.params)
        if verbose:
            _log(f"[{name}] trained in {time.time() - start:.0f}s -> {path}")
    return H.load_checkpoint(cfg)


def heldout(name: str, count: int = HELDOUT_CLIPS):
    """Clips and ground-truth fields disjoint from the training and validation sets."""
    cfg = RECIPES[name].cfg
    return corpus(cfg.synth, count, HELDOUT_SEED, t=cfg.gop_length, width=cfg.width, height=cfg.height, max_speed=cfg.max_speed)


def heldout_psnr(model: H.Model, clips) -> float:
    k0, k1 = nets.referencing_range(model.cfg)
    vals = []
    for clip, _ in clips:
        pred = nets.predict_clip(clip, model.params, model.cfg)
        vals.extend(psnr(clip.frames[k0 + i], pred.frames[i]) for i in range(k1 - k0))
    return float(np.mean(vals))


def heldout_bpp(model: H.Model, clips) -> float:
    return bpp([H.encode_learned(clip, model) for clip, _ in clips])


def importance_split(model: H.Model, clips) -> tuple[float, float]:
    """Mean quantized importance over code sites touched by moving objects and over the rest.

    A site covers an 8x8x8 block of the padded GOP; it counts as moving when
    any of its pixels carries a nonzero ground-truth vector.
    """
    if not model.cfg.dba or model.cfg.kind != "P":
        raise ValueError("importance_split needs a P model with dba")
    moving, still = [], []
    f = nets.FACTOR
    for clip, fields in clips:
        q = nets.predict_clip(clip, model.params, model.cfg).q
        t, h, w = q.shape
        motion = np.zeros((t * f, h * f, w * f), bool)
        for k, fld in enumerate(fields, start=1):
            v = fld.vectors
            motion[k, : v.shape[0], : v.shape[1]] = np.any(v != 0, axis=-1)
        site = motion.reshape(t, f, h, f, w, f).any(axis=(1, 3, 5))
        moving.extend(q[site])
        still.extend(q[~site])
    return float(np.mean(moving)), float(np.mean(still))


def heldout_flow_epe(model: H.Model, clips) -> float:
    """Metric EPE between dense flow of the originals and of the model's predictions."""
    k0, k1 = nets.referencing_range(model.cfg)
    vals = []
    for clip, _ in clips:
        pred = nets.predict_clip(clip, model.params, model.cfg)
        recon = [Frame(pred.frames[i]) for i in range(k1 - k0)]
        vals.append(H.flow_scores(clip.frames[k0 - 1 : k1], recon)[0])
    return float(np.mean(vals))
