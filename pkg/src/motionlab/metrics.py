"""Quality and rate metrics: PSNR, SSIM, flow divergence, bits per pixel."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .blockmotion import MotionField
from .errors import ShapeError, SizeError
from .video import Frame

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REPORT_COLUMNS = ("codec", "params", "bpp", "psnr", "ssim", "epe", "cosine", "encode_s", "decode_s")


def _as_uint8(x) -> np.ndarray:
    if isinstance(x, Frame):
        return x.to_uint8()
    return np.asarray(x)


def psnr(a, b, peak: float = 255.0) -> float:
    """PSNR in dB over every sample; identical inputs give ``PSNR_CAP``."""
    a, b = _as_uint8(a), _as_uint8(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _luma(x) -> np.ndarray:
    if isinstance(x, Frame):
        return x.luma().astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., 0]
    return x


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def ssim(a, b, peak: float = 255.0) -> float:
    """Single-scale SSIM on luma, averaged over all valid window positions."""
    x, y = _luma(a), _luma(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim needs equal shapes, got {x.shape} and {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise SizeError(f"frame {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean())


# ---------------------------------------------------------------------------
# flow divergence


def _vectors(fields, normalize: bool) -> np.ndarray:
    if isinstance(fields, MotionField):
        fields = [fields]
    out = []
    for f in fields:
        out.append(f.normalized_vectors() if normalize else f.vectors.astype(np.float64))
    return np.concatenate([v.reshape(-1, 2) for v in out]) if out else np.zeros((0, 2))


def _aligned(vg, vp) -> None:
    gs = [vg] if isinstance(vg, MotionField) else list(vg)
    ps = [vp] if isinstance(vp, MotionField) else list(vp)
    if len(gs) != len(ps):
        raise ShapeError(f"{len(gs)} ground-truth fields against {len(ps)} predicted fields")
    for i, (g, p) in enumerate(zip(gs, ps)):
        if not g.same_geometry(p):
            raise ShapeError(f"field {i}: grids {g.grid} and {p.grid} are not aligned")


def epe_vectors(vg: np.ndarray, vp: np.ndarray) -> float:
    """Mean Euclidean distance between matching rows of two (N, 2) arrays."""
    if vg.shape != vp.shape:
        raise ShapeError(f"vector arrays differ: {vg.shape} vs {vp.shape}")
    if len(vg) == 0:
        return 0.0
    return float(np.sqrt(((vg - vp) ** 2).sum(axis=1)).mean())


def cosine_vectors(vg: np.ndarray, vp: np.ndarray) -> float:
    """Mean of ``1 - cos`` between matching rows; pairs with a zero vector count 0."""
    if vg.shape != vp.shape:
        raise ShapeError(f"vector arrays differ: {vg.shape} vs {vp.shape}")
    if len(vg) == 0:
        return 0.0
    ng = np.sqrt((vg**2).sum(axis=1))
    npd = np.sqrt((vp**2).sum(axis=1))
    ok = (ng > 0) & (npd > 0)
    terms = np.zeros(len(vg))
    cos = (vg[ok] * vp[ok]).sum(axis=1) / (ng[ok] * npd[ok])
    terms[ok] = 1.0 - np.clip(cos, -1.0, 1.0)
    return float(terms.mean())


def flow_divergence(vg, vp, kind: str = "epe", normalize: bool = True) -> float:
    """EPE or cosine divergence between two aligned field sequences.

    With ``normalize`` each component is divided by the frame width or height
    before comparison.
    """
    _aligned(vg, vp)
    a, b = _vectors(vg, normalize), _vectors(vp, normalize)
    if kind == "epe":
        return epe_vectors(a, b)
    if kind == "cosine":
        return cosine_vectors(a, b)
    raise ValueError(f"unknown divergence kind {kind!r}")


def bpp(coded) -> float:
    """Counted bits per referencing-frame pixel for one coded GOP or a list of them."""
    gops = coded if isinstance(coded, (list, tuple)) else [coded]
    bits = sum(g.counted_bits for g in gops)
    pixels = sum(g.n_pred * g.width * g.height for g in gops)
    return bits / pixels if pixels else 0.0


# ---------------------------------------------------------------------------
# reporting


@dataclass
class QualityReport:
    psnr_frames: list[float] = field(default_factory=list)
    ssim_frames: list[float] = field(default_factory=list)
    epe: float = 0.0
    cosine: float = 0.0
    bpp: float = 0.0
    header_bits: int = 0
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def psnr(self) -> float:
        return float(np.mean(self.psnr_frames)) if self.psnr_frames else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean(self.ssim_frames)) if self.ssim_frames else float("nan")


def frame_quality(targets: Sequence, preds: Sequence) -> tuple[list[float], list[float]]:
    if len(targets) != len(preds):
        raise ShapeError(f"{len(targets)} targets against {len(preds)} predictions")
    return [psnr(t, p) for t, p in zip(targets, preds)], [ssim(t, p) for t, p in zip(targets, preds)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def report_csv(rows: Sequence[dict], columns: Sequence[str] = REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
