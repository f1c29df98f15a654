"""Training losses on network-space frames.

Frames are ``(C, H, W)`` tensors in one of the layouts of ``ModelConfig``:
``quad`` (C=4, analyzer channels), ``mosaic`` (C=1, a raw DoFP mosaic that is
demosaicked differentiably before any polarization quantity is formed) or
``rgb`` (C=3, conventional video; only the intensity loss applies).

The L2 terms are root-mean-square distances over pixels. The AoLP term works
on aolp/pi in [0, 1] and ignores the wrap at pi.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from . import optics
from . import tensor as T
from .tensor import ConfigurationError, ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    intensity: float = 0.1
    stokes: float = 1.0
    aolp: float = 0.0
    dolp: float = 0.0

    def __post_init__(self):
        values = astuple(self)
        if any(not np.isfinite(v) or v < 0 for v in values):
            raise ConfigurationError(f"loss weights must be finite and nonnegative, got {values}")
        if not any(v > 0 for v in values):
            raise ConfigurationError("at least one loss weight must be positive")

    @property
    def polarized(self) -> bool:
        return any(v > 0 for v in (self.stokes, self.aolp, self.dolp))


def _pair(pred: Tensor, target) -> tuple[Tensor, Tensor]:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred, target


def _rms(d: Tensor) -> Tensor:
    return T.sqrt(T.mean(T.square(d)))


def demosaic_tensor(m: Tensor) -> Tensor:
    """Differentiable counterpart of ``optics.demosaic`` for a (2H, 2W) or (1, 2H, 2W) mosaic."""
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise ShapeError(f"mosaic frames have one channel, got {m.shape}")
        m = m.reshape(m.shape[1:])
    if m.ndim != 2 or m.shape[0] % 2 or m.shape[1] % 2:
        raise optics.FormatError(f"mosaic extents must be even, got {m.shape}")
    h, w = m.shape[0] // 2, m.shape[1] // 2
    channels = []
    for k, (dr, dc) in optics.SITE_OFFSETS.items():
        rows, cols = optics.site_operators(h, w, k, to_sites=False)
        sites = m[dr::2, dc::2]
        channels.append(T.matmul(T.matmul(Tensor(rows.astype(m.dtype)), sites), Tensor(cols.T.astype(m.dtype))))
    return T.stack(channels, axis=0)


def to_quad(frame: Tensor, layout: str) -> Tensor:
    if layout == "quad":
        if frame.ndim != 3 or frame.shape[0] != 4:
            raise ShapeError(f"quad frames are (4, H, W), got {frame.shape}")
        return frame
    if layout == "mosaic":
        return demosaic_tensor(frame)
    raise ConfigurationError(f"layout {layout!r} carries no polarization channels")


def stokes_tensor(quad: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    i0, i45, i90, i135 = quad[0], quad[1], quad[2], quad[3]
    return 0.5 * (i0 + i45 + i90 + i135), i0 - i90, i45 - i135


def aolp_tensor(s1: Tensor, s2: Tensor) -> Tensor:
    """aolp/pi in [0, 1); the wrap is a constant offset, so it passes gradients unchanged."""
    raw = T.atan2(s2, s1) * 0.5
    offset = np.where(raw.data < 0, np.pi, 0.0).astype(raw.dtype)
    return (raw + Tensor(offset)) * (1.0 / np.pi)


def dolp_tensor(s0: Tensor, s1: Tensor, s2: Tensor, eps: float = optics.DOLP_EPS) -> Tensor:
    return T.clamp(T.hypot(s1, s2) / T.maximum(s0, eps), 0.0, 1.0)


def loss_intensity(pred: Tensor, target) -> Tensor:
    """Mean absolute error over all elements."""
    pred, target = _pair(pred, target)
    return T.mean(T.tensor_abs(pred - target))


def loss_stokes(pred: Tensor, target, layout: str = "quad") -> Tensor:
    """Mean over S0, S1, S2 of the RMS difference."""
    pred, target = _pair(pred, target)
    sp = stokes_tensor(to_quad(pred, layout))
    st = stokes_tensor(to_quad(target, layout))
    return (_rms(sp[0] - st[0]) + _rms(sp[1] - st[1]) + _rms(sp[2] - st[2])) * (1.0 / 3.0)


def loss_aolp(pred: Tensor, target, layout: str = "quad") -> Tensor:
    pred, target = _pair(pred, target)
    _, p1, p2 = stokes_tensor(to_quad(pred, layout))
    _, t1, t2 = stokes_tensor(to_quad(target, layout))
    return _rms(aolp_tensor(p1, p2) - aolp_tensor(t1, t2))


def loss_dolp(pred: Tensor, target, layout: str = "quad") -> Tensor:
    pred, target = _pair(pred, target)
    return _rms(dolp_tensor(*stokes_tensor(to_quad(pred, layout)))
                - dolp_tensor(*stokes_tensor(to_quad(target, layout))))


def loss_terms(pred: Tensor, target, weights: LossWeights, layout: str = "quad") -> dict[str, Tensor]:
    """The individual terms that carry a positive weight."""
    if layout == "rgb" and weights.polarized:
        raise ConfigurationError("polarization loss terms need the quad or mosaic layout")
    fns = {"intensity": lambda: loss_intensity(pred, target),
           "stokes": lambda: loss_stokes(pred, target, layout),
           "aolp": lambda: loss_aolp(pred, target, layout),
           "dolp": lambda: loss_dolp(pred, target, layout)}
    return {name: fn() for name, fn in fns.items() if getattr(weights, name) > 0}


def combine(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    total = None
    for name, term in terms.items():
        part = term * getattr(weights, name)
        total = part if total is None else total + part
    return total


def loss_combined(pred: Tensor, target, weights: LossWeights = LossWeights(),
                  layout: str = "quad") -> Tensor:
    """Weighted sum of the intensity, Stokes, AoLP and DoLP terms."""
    return combine(loss_terms(pred, target, weights, layout), weights)
