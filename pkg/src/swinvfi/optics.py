"""Polarization math for division-of-focal-plane (DoFP) imagery.

Quad arrays hold the four analyzer channels on axis -3 in the order
(I0, I45, I90, I135); values are normalized digital counts in [0, 1].

Mosaic geometry. A 2H x 2W mosaic holds H x W super-pixels laid out as::

    0    45
    135  90

Super-pixel (i, j) has its center at quad coordinate (i, j); each analyzer
site sits a quarter super-pixel away from that center. ``mosaic`` samples
every channel at its own site and ``demosaic`` interpolates every channel back
to the centers. Both use linear interpolation with linear extrapolation at the
borders, so the round trip is exact on per-channel affine images.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

ANGLES_DEG = (0, 45, 90, 135)
DOLP_EPS = 1e-6

# (row, col) offset inside the 2x2 super-pixel for each channel of the quad.
SITE_OFFSETS = {0: (0, 0), 1: (0, 1), 2: (1, 1), 3: (1, 0)}


class FormatError(ValueError):
    """Image extents or encodings that the DoFP layout cannot represent."""


@dataclass(frozen=True)
class StokesMap:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.s0, self.s1, self.s2], axis=-3)


@dataclass(frozen=True)
class PolarizationMaps:
    """Everything derived from one quad. ``clamped`` counts DoLP pixels whose
    raw value fell outside [0, 1] before clamping."""

    intensity: np.ndarray
    stokes: StokesMap
    aolp: np.ndarray
    dolp: np.ndarray
    clamped: int = 0


@dataclass(frozen=True)
class NormalizedMaps:
    """All quantities mapped into [0, 1] for metrics and losses."""

    intensity: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    aolp: np.ndarray
    dolp: np.ndarray

    def stokes(self) -> np.ndarray:
        """Normalized (S0/2, S1, S2) stacked on axis -3."""
        return np.stack([self.intensity, self.s1, self.s2], axis=-3)


def _check_quad(q: np.ndarray) -> None:
    if q.ndim < 3 or q.shape[-3] != 4:
        raise FormatError(f"expected a quad with 4 channels on axis -3, got shape {q.shape}")


def stokes_from_quad(q: np.ndarray) -> StokesMap:
    _check_quad(q)
    i0, i45, i90, i135 = (q[..., k, :, :] for k in range(4))
    return StokesMap(0.5 * (i0 + i45 + i90 + i135), i0 - i90, i45 - i135)


def dolp_aolp(s: StokesMap, eps: float = DOLP_EPS, return_clamped: bool = False):
    """Degree and angle of linear polarization.

    DoLP is clamped to [0, 1]; AoLP lies in [0, pi) with atan2(0, 0) taken as 0.
    With ``return_clamped`` the number of clamped DoLP pixels is returned too.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    raw = np.hypot(s.s1, s.s2) / np.maximum(s.s0, eps)
    clamped = int(np.count_nonzero((raw > 1.0) | (raw < 0.0)))
    dolp = np.clip(raw, 0.0, 1.0)
    aolp = 0.5 * np.arctan2(s.s2, s.s1)
    aolp = np.where(aolp < 0, aolp + np.pi, aolp)
    # A tiny negative angle plus pi rounds to pi; fold it back to keep [0, pi).
    aolp = np.where(aolp >= np.pi, aolp - np.pi, aolp)
    if return_clamped:
        return dolp, aolp, clamped
    return dolp, aolp


def polarization_maps(q: np.ndarray, eps: float = DOLP_EPS) -> PolarizationMaps:
    s = stokes_from_quad(q)
    dolp, aolp, clamped = dolp_aolp(s, eps, return_clamped=True)
    return PolarizationMaps(0.5 * s.s0, s, aolp, dolp, clamped)


def normalize_maps(p: PolarizationMaps) -> NormalizedMaps:
    return NormalizedMaps(
        intensity=p.stokes.s0 / 2.0,
        s1=(p.stokes.s1 + 1.0) / 2.0,
        s2=(p.stokes.s2 + 1.0) / 2.0,
        aolp=p.aolp / np.pi,
        dolp=p.dolp,
    )


# -- mosaic geometry -----------------------------------------------------------

@lru_cache(maxsize=64)
def quarter_shift_matrix(n: int, direction: int) -> np.ndarray:
    """(n, n) operator resampling a length-n signal at positions i + direction/4.

    Linear interpolation between neighbours, linear extrapolation past the ends.
    A length-1 signal is treated as constant.
    """
    if direction not in (-1, 1):
        raise ValueError("direction must be -1 or +1")
    a = np.zeros((n, n))
    for i in range(n if n > 1 else 0):
        j = i + direction
        if 0 <= j < n:
            a[i, i] += 0.75
            a[i, j] += 0.25
        else:
            # Extrapolate along the line through samples i and i - direction.
            a[i, i] += 1.25
            a[i, i - direction] -= 0.25
    if n == 1:
        a[0, 0] = 1.0
    a.setflags(write=False)
    return a


def site_operators(h: int, w: int, channel: int, to_sites: bool) -> tuple[np.ndarray, np.ndarray]:
    """Row and column operators moving one channel between super-pixel
    centers and its analyzer sites (``to_sites``) or back."""
    dr, dc = SITE_OFFSETS[channel]
    sign = 1 if to_sites else -1
    return (quarter_shift_matrix(h, sign * (2 * dr - 1)),
            quarter_shift_matrix(w, sign * (2 * dc - 1)))


def mosaic(q: np.ndarray) -> np.ndarray:
    """(..., 4, H, W) quad -> (..., 2H, 2W) DoFP mosaic."""
    _check_quad(q)
    h, w = q.shape[-2:]
    out = np.empty(q.shape[:-3] + (2 * h, 2 * w), dtype=np.result_type(q.dtype, np.float32))
    for k, (dr, dc) in SITE_OFFSETS.items():
        rows, cols = site_operators(h, w, k, to_sites=True)
        out[..., dr::2, dc::2] = rows @ q[..., k, :, :] @ cols.T
    return out


def demosaic(m: np.ndarray) -> np.ndarray:
    """(..., 2H, 2W) DoFP mosaic -> (..., 4, H, W) quad on the super-pixel centers."""
    if m.ndim < 2 or m.shape[-2] % 2 or m.shape[-1] % 2:
        raise FormatError(f"mosaic extents must be even, got {m.shape[-2:]}")
    h, w = m.shape[-2] // 2, m.shape[-1] // 2
    out = np.empty(m.shape[:-2] + (4, h, w), dtype=np.result_type(m.dtype, np.float32))
    for k, (dr, dc) in SITE_OFFSETS.items():
        rows, cols = site_operators(h, w, k, to_sites=False)
        out[..., k, :, :] = rows @ m[..., dr::2, dc::2] @ cols.T
    return out


# -- visualization ---------------------------------------------------------------

def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB with all components in [0, 1]; hue wraps at 1."""
    h = np.mod(h, 1.0) * 6.0
    sector = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ]
    rgb = np.zeros(h.shape + (3,))
    for idx, (r, g, b) in enumerate(choices):
        sel = sector == idx
        rgb[sel, 0], rgb[sel, 1], rgb[sel, 2] = r[sel], g[sel], b[sel]
    return rgb


def visualize_aolp_dolp(aolp: np.ndarray, dolp: np.ndarray) -> np.ndarray:
    """AoLP as hue and DoLP as brightness, returned as an (H, W, 3) uint8 image."""
    aolp = np.asarray(aolp, dtype=np.float64)
    dolp = np.clip(np.asarray(dolp, dtype=np.float64), 0.0, 1.0)
    rgb = hsv_to_rgb(aolp / np.pi, np.ones_like(aolp), dolp)
    return np.round(rgb * 255).astype(np.uint8)


# -- image I/O -------------------------------------------------------------------

def to_uint16(a: np.ndarray) -> np.ndarray:
    return np.round(np.clip(a, 0.0, 1.0) * 65535).astype(np.uint16)


def write_png16(path: str | Path, image: np.ndarray) -> None:
    """Store a single-channel [0, 1] image as 16-bit grayscale PNG."""
    if image.ndim != 2:
        raise FormatError(f"16-bit PNG expects a 2-D image, got shape {image.shape}")
    Image.fromarray(to_uint16(image)).save(path, format="PNG")


def read_png16(path: str | Path) -> np.ndarray:
    """Load a 16-bit grayscale PNG as float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2 or arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise FormatError(f"{path}: expected a single-channel 16-bit PNG, got {arr.dtype} {arr.shape}")
    scale = 255.0 if arr.dtype == np.uint8 else 65535.0
    return (arr.astype(np.float64) / scale).astype(np.float32)


def write_png8_rgb(path: str | Path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[-1] != 3 or rgb.dtype != np.uint8:
        raise FormatError(f"expected (H, W, 3) uint8, got {rgb.dtype} {rgb.shape}")
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
