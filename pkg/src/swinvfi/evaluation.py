"""Image quality metrics, baseline interpolators and test-split reports.

Every metric is computed on normalized quantities in [0, 1]: intensity S0/2,
the Stokes stack (S0/2, (S1+1)/2, (S2+1)/2) scored jointly, AoLP/pi and DoLP.
AoLP scores ignore the wrap at pi, so angles just below pi and just above 0
count as far apart.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from . import optics
from .data import Dataset, DatasetError, Septuplet, sample_septuplet

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
QUANTITIES = ("intensity", "stokes", "aolp", "dolp")
AOLP_FOOTER = "# aolp scores are computed on aolp/pi without wrap handling at pi"

Predictor = Callable[[np.ndarray], np.ndarray]


def _same_shape(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 100 dB when the MSE is below 1e-10."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    The SSIM map is averaged over every pixel, with reflected borders; inputs
    with more than two axes are treated as a stack of channels on the leading
    axes and the per-channel scores are averaged.
    """
    a, b = _same_shape(a, b)
    if a.ndim < 2:
        raise ValueError("ssim needs at least two spatial axes")
    a2 = a.reshape((-1,) + a.shape[-2:])
    b2 = b.reshape((-1,) + b.shape[-2:])
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    scores = []
    for x, y in zip(a2, b2):
        def blur(img):
            # truncate 3.5 at sigma 1.5 gives a radius-5, 11-tap window.
            return gaussian_filter(img, sigma=1.5, truncate=3.5, mode="reflect")

        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cov = blur(x * y) - mx * my
        smap = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(float(smap.mean()))
    return float(np.mean(scores))


# -- baselines ------------------------------------------------------------------------

def baseline_interpolate(kind: str, septuplet: Septuplet | np.ndarray) -> np.ndarray:
    """``copy`` returns I0; ``average`` returns the mean of I0 and I1."""
    inputs = septuplet.inputs if isinstance(septuplet, Septuplet) else np.asarray(septuplet)
    if inputs.shape[0] != 6:
        raise ValueError(f"expected six input frames, got {inputs.shape[0]}")
    if kind == "copy":
        return inputs[2].copy()
    if kind == "average":
        return 0.5 * (inputs[2] + inputs[3])
    raise ValueError(f"unknown baseline {kind!r}")


def baseline_predictor(kind: str) -> Predictor:
    return lambda inputs: baseline_interpolate(kind, inputs)


# -- per-frame scoring -------------------------------------------------------------------

def frame_quad(frame: np.ndarray, layout: str) -> np.ndarray:
    if layout == "quad":
        return frame
    if layout == "mosaic":
        return optics.demosaic(frame[0])
    raise ValueError(f"layout {layout!r} has no polarization channels")


def score_frame(pred: np.ndarray, target: np.ndarray, layout: str = "quad") -> dict[str, float]:
    """PSNR and SSIM of every normalized quantity, plus the clamped-DoLP count of the prediction.

    The prediction is clipped to [0, 1] first, like any stored image would be.
    """
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    target = np.asarray(target, dtype=np.float64)
    if layout == "rgb":
        pi, ti = pred.mean(axis=0), target.mean(axis=0)
        out = {"intensity_psnr": psnr(pi, ti), "intensity_ssim": ssim(pi, ti), "clamped": 0}
        for q in QUANTITIES[1:]:
            out[f"{q}_psnr"] = out[f"{q}_ssim"] = float("nan")
        return out
    pm = optics.polarization_maps(frame_quad(pred, layout))
    tm = optics.polarization_maps(frame_quad(target, layout))
    pn, tn = optics.normalize_maps(pm), optics.normalize_maps(tm)
    pairs = {
        "intensity": (pn.intensity, tn.intensity),
        "stokes": (pn.stokes(), tn.stokes()),
        "aolp": (pn.aolp, tn.aolp),
        "dolp": (pn.dolp, tn.dolp),
    }
    out: dict[str, float] = {"clamped": pm.clamped}
    for name, (p, t) in pairs.items():
        out[f"{name}_psnr"] = psnr(p, t)
        out[f"{name}_ssim"] = ssim(p, t)
    return out


# -- reports -----------------------------------------------------------------------------

METRIC_KEYS = tuple(f"{q}_{m}" for q in QUANTITIES for m in ("psnr", "ssim"))


@dataclass
class MetricReport:
    per_clip: dict[str, dict[str, float]] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)
    clamped: int = 0
    skipped: list[str] = field(default_factory=list)
    params: int | None = None
    flops: int | None = None
    frame_shape: tuple[int, int] | None = None
    wall_time: float = 0.0

    def to_csv(self) -> str:
        """One row per clip then the aggregate row; wall time is left out so
        repeated runs produce identical files."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["clip", "septuplets", *METRIC_KEYS, "clamped", "params", "flops"])

        def fmt(v):
            return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"

        for clip in sorted(self.per_clip):
            row = self.per_clip[clip]
            writer.writerow([clip, int(row["septuplets"]), *(fmt(row[k]) for k in METRIC_KEYS),
                             int(row["clamped"]), "", ""])
        agg = self.aggregate
        writer.writerow(["aggregate", int(agg.get("septuplets", 0)),
                         *(fmt(agg.get(k, float("nan"))) for k in METRIC_KEYS), self.clamped,
                         "" if self.params is None else self.params,
                         "" if self.flops is None else self.flops])
        if self.skipped:
            buf.write(f"# skipped clips: {' '.join(self.skipped)}\n")
        buf.write(AOLP_FOOTER + "\n")
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def evaluate(predictor: Predictor, dataset: Dataset, split: str = "test", layout: str = "quad",
             crop: int | None = None, stride: int = 1, panel_dir: str | Path | None = None,
             clips: list[str] | None = None) -> MetricReport:
    """Score a predictor on every septuplet of a split.

    Clips are scored independently and in sorted order; the aggregate is the
    mean of the per-clip means. Unreadable clips are skipped and listed.
    ``crop`` takes the centered window of that many mosaic pixels.
    """
    start_time = time.perf_counter()
    report = MetricReport()
    clip_ids = sorted(clips if clips is not None else dataset.clip_ids(split))
    for clip in clip_ids:
        try:
            frames = dataset.clips[clip]["frames"]
            rows = []
            for start in range(0, frames - 6, stride):
                sep = _centered(dataset, clip, start, crop, layout)
                pred = predictor(sep.inputs)
                rows.append(score_frame(pred, sep.target, layout))
                report.frame_shape = sep.target.shape[-2:]
                if panel_dir is not None and start == 0:
                    write_panel(Path(panel_dir) / f"{clip}.png", sep, pred, layout)
        except DatasetError as exc:
            log.warning("skipping clip %s: %s", clip, exc)
            report.skipped.append(clip)
            continue
        clip_row = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS}
        clip_row["clamped"] = int(sum(r["clamped"] for r in rows))
        clip_row["septuplets"] = len(rows)
        report.per_clip[clip] = clip_row
        report.clamped += clip_row["clamped"]
    if report.per_clip:
        report.aggregate = {k: float(np.mean([c[k] for c in report.per_clip.values()])) for k in METRIC_KEYS}
        report.aggregate["septuplets"] = sum(c["septuplets"] for c in report.per_clip.values())
    report.wall_time = time.perf_counter() - start_time
    return report


def _centered(dataset: Dataset, clip: str, start: int, crop: int | None, layout: str) -> Septuplet:
    if crop is None:
        return sample_septuplet(dataset, clip, start, layout=layout)
    spec = dataset.spec(clip)
    top = 2 * ((2 * spec.height - crop) // 4)
    left = 2 * ((2 * spec.width - crop) // 4)
    return sample_septuplet(dataset, clip, start, crop=crop, layout=layout, offset=(top, left))


def model_predictor(cfg, params) -> Predictor:
    """Wrap a network as a numpy predictor that runs without building a graph."""
    from . import network, tensor as T

    def predict(inputs: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return network.forward(T.Tensor(inputs.astype(np.float32)), cfg, params).data

    return predict


def evaluate_model(cfg, params, dataset: Dataset, split: str = "test", crop: int | None = None,
                   stride: int = 1, panel_dir: str | Path | None = None) -> MetricReport:
    from . import network

    report = evaluate(model_predictor(cfg, params), dataset, split, cfg.layout, crop, stride, panel_dir)
    report.params = network.count_params(cfg)
    if report.frame_shape is not None:
        report.flops = network.count_flops(cfg, *report.frame_shape)
    return report


# -- panels ------------------------------------------------------------------------------

def _gray(img: np.ndarray) -> np.ndarray:
    g = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def _intensity(frame: np.ndarray, layout: str) -> np.ndarray:
    if layout == "rgb":
        return frame.mean(axis=0)
    return 0.5 * optics.stokes_from_quad(frame_quad(frame, layout)).s0


def panel(septuplet: Septuplet, prediction: np.ndarray, layout: str = "quad") -> np.ndarray:
    """Side-by-side strip: I0, I1, prediction, target, then AoLP-DoLP views of prediction and target."""
    pred = np.clip(prediction, 0.0, 1.0)
    inputs = septuplet.inputs
    tiles = [_gray(_intensity(f, layout)) for f in (inputs[2], inputs[3], pred, septuplet.target)]
    if layout != "rgb":
        for f in (pred, septuplet.target):
            m = optics.polarization_maps(frame_quad(f, layout))
            tiles.append(optics.visualize_aolp_dolp(m.aolp, m.dolp))
    gap = np.full((tiles[0].shape[0], 2, 3), 255, dtype=np.uint8)
    strip = [tiles[0]]
    for t in tiles[1:]:
        strip += [gap, t]
    return np.concatenate(strip, axis=1)


def write_panel(path: Path, septuplet: Septuplet, prediction: np.ndarray, layout: str = "quad") -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    optics.write_png8_rgb(path, panel(septuplet, prediction, layout))
