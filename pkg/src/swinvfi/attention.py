"""Shifted-cube multi-head self-attention over (T, H, W, D) feature lattices.

Tokens are grouped into non-overlapping t x h x w cubes and attend only within
their cube. Every second attention layer first rolls the lattice by half a
cube along each axis; tokens that the roll brings together from opposite
borders are kept apart by an additive -inf mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    cube: tuple[int, int, int]
    heads: int
    dim: int

    def __post_init__(self):
        if len(self.cube) != 3 or min(self.cube) < 1:
            raise ConfigurationError(f"cube extents must be three positive ints, got {self.cube}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigurationError(f"width {self.dim} is not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def tokens_per_cube(self) -> int:
        t, h, w = self.cube
        return t * h * w

    @property
    def shift(self) -> tuple[int, int, int]:
        return tuple(c // 2 for c in self.cube)


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (x * std).astype(np.float32)


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


@dataclass
class AttentionWeights:
    """Projections, learnable softmax scale and positional-embedding convs.

    ``pos1_*``/``pos2_*`` are depthwise 3x3x3 kernels laid out (3, 3, 3, D).
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    scale: Tensor
    pos1_w: Tensor
    pos1_b: Tensor
    pos2_w: Tensor
    pos2_b: Tensor

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "AttentionWeights":
        d = cfg.dim
        return cls(
            wq=_param(_trunc_normal(rng, (d, d))),
            wk=_param(_trunc_normal(rng, (d, d))),
            wv=_param(_trunc_normal(rng, (d, d))),
            wo=_param(_trunc_normal(rng, (d, d))),
            scale=_param(np.float32(math.sqrt(cfg.head_dim))),
            pos1_w=_param(_fan_in_uniform(rng, (3, 3, 3, d), 27)),
            pos1_b=_param(np.zeros(d)),
            pos2_w=_param(_fan_in_uniform(rng, (3, 3, 3, d), 27)),
            pos2_b=_param(np.zeros(d)),
        )

    @staticmethod
    def count(dim: int) -> int:
        return 4 * dim * dim + 1 + 2 * (27 * dim + dim)


@dataclass
class SubBlockWeights:
    norm1_g: Tensor
    norm1_b: Tensor
    attn: AttentionWeights
    norm2_g: Tensor
    norm2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator, ffn_ratio: int = 2):
        d, hdim = cfg.dim, cfg.dim * ffn_ratio
        return cls(
            norm1_g=_param(np.ones(d)),
            norm1_b=_param(np.zeros(d)),
            attn=AttentionWeights.init(cfg, rng),
            norm2_g=_param(np.ones(d)),
            norm2_b=_param(np.zeros(d)),
            ffn_w1=_param(_trunc_normal(rng, (d, hdim))),
            ffn_b1=_param(np.zeros(hdim)),
            ffn_w2=_param(_trunc_normal(rng, (hdim, d))),
            ffn_b2=_param(np.zeros(d)),
        )

    @staticmethod
    def count(dim: int, ffn_ratio: int = 2) -> int:
        hdim = dim * ffn_ratio
        return 4 * dim + AttentionWeights.count(dim) + dim * hdim + hdim + hdim * dim + dim


@dataclass
class SwinBlockWeights:
    """Unshifted sub-block followed by a shifted one, with separate weights."""

    regular: SubBlockWeights
    shifted: SubBlockWeights

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator, ffn_ratio: int = 2):
        return cls(SubBlockWeights.init(cfg, rng, ffn_ratio), SubBlockWeights.init(cfg, rng, ffn_ratio))

    @staticmethod
    def count(dim: int, ffn_ratio: int = 2) -> int:
        return 2 * SubBlockWeights.count(dim, ffn_ratio)


@dataclass
class CubePartition:
    """Bookkeeping needed to undo :func:`partition`.

    ``mask`` has shape (num_cubes, thw, thw) with entries 0 or -inf, or is
    None when no pair needs masking.
    """

    extents: tuple[int, int, int]
    cube: tuple[int, int, int]
    padding: tuple[int, int, int]
    shift: tuple[int, int, int] = (0, 0, 0)
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def padded(self) -> tuple[int, int, int]:
        return tuple(e + p for e, p in zip(self.extents, self.padding))

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(p // c for p, c in zip(self.padded, self.cube))

    @property
    def num_cubes(self) -> int:
        g = self.grid
        return g[0] * g[1] * g[2]


def _padding_for(extents, cube) -> tuple[int, int, int]:
    return tuple((-e) % c for e, c in zip(extents, cube))


def partition(x: Tensor, cfg: AttentionConfig) -> tuple[Tensor, CubePartition]:
    """Split a (T, H, W, D) lattice into (num_cubes, t*h*w, D) token groups.

    Extents that are not multiples of the cube are zero-padded on the high
    side. Rows within a cube are ordered t-major, then h, then w.
    """
    extents = tuple(x.shape[:3])
    part = CubePartition(extents, tuple(cfg.cube), _padding_for(extents, cfg.cube))
    if any(part.padding):
        x = T.pad(x, [(0, p) for p in part.padding] + [(0, 0)])
    return _to_cubes(x, part.cube), part


def _to_cubes(x: Tensor, cube) -> Tensor:
    tp, hp, wp, d = x.shape
    t, h, w = cube
    x = x.reshape(tp // t, t, hp // h, h, wp // w, w, d)
    x = x.permute(0, 2, 4, 1, 3, 5, 6)
    return x.reshape(-1, t * h * w, d)


def unpartition(cubes: Tensor, part: CubePartition) -> Tensor:
    """Inverse of :func:`partition`, cropping any padding."""
    gt, gh, gw = part.grid
    t, h, w = part.cube
    d = cubes.shape[-1]
    x = cubes.reshape(gt, gh, gw, t, h, w, d).permute(0, 3, 1, 4, 2, 5, 6)
    x = x.reshape(gt * t, gh * h, gw * w, d)
    if any(part.padding):
        te, he, we = part.extents
        x = x[:te, :he, :we]
    return x


def region_labels(padded, cube, shift) -> np.ndarray:
    """Label each site of the rolled lattice by the contiguous region it came from.

    Along an axis with a nonzero shift s and cube extent c, rolled positions
    split into [0, P-c), [P-c, P-s) and [P-s, P); the last block holds tokens
    that wrapped around the border.
    """
    labels = np.zeros(padded, dtype=np.int64)
    bounds = []
    for p, c, s in zip(padded, cube, shift):
        if s == 0:
            bounds.append([slice(0, p)])
        else:
            bounds.append([slice(0, p - c), slice(p - c, p - s), slice(p - s, p)])
    n = 0
    for a in bounds[0]:
        for b in bounds[1]:
            for d in bounds[2]:
                labels[a, b, d] = n
                n += 1
    return labels


def build_mask(part: CubePartition) -> np.ndarray | None:
    """Additive attention mask for a (possibly shifted, possibly padded) lattice.

    A pair is blocked when its tokens come from different wrap regions, or
    when the key is a padding token (a token may always attend to itself).
    """
    padded, cube, shift = part.padded, part.cube, part.shift
    shifted = any(shift)
    padded_any = any(part.padding)
    if not shifted and not padded_any:
        return None
    n = cube[0] * cube[1] * cube[2]
    labels = region_labels(padded, cube, shift)
    # Validity of each rolled site: its pre-roll coordinate lies inside the extents.
    coords = np.indices(padded)
    valid = np.ones(padded, dtype=bool)
    for ax in range(3):
        orig = (coords[ax] + shift[ax]) % padded[ax]
        valid &= orig < part.extents[ax]

    def cubes_of(arr):
        gt, gh, gw = part.grid
        t, h, w = cube
        return arr.reshape(gt, t, gh, h, gw, w).transpose(0, 2, 4, 1, 3, 5).reshape(-1, n)

    lab = cubes_of(labels)
    val = cubes_of(valid)
    blocked = lab[:, :, None] != lab[:, None, :]
    blocked |= ~val[:, None, :]
    blocked[:, np.arange(n), np.arange(n)] = False
    if not blocked.any():
        return None
    mask = np.zeros(blocked.shape, dtype=np.float32)
    mask[blocked] = -np.inf
    return mask


def shift(x: Tensor, cfg: AttentionConfig) -> tuple[Tensor, CubePartition]:
    """Pad, roll by half a cube and partition; returns cubes plus bookkeeping.

    The partition's ``mask`` carries the wrap/padding mask for the cubes.
    """
    extents = tuple(x.shape[:3])
    part = CubePartition(extents, tuple(cfg.cube), _padding_for(extents, cfg.cube), cfg.shift)
    if any(part.padding):
        x = T.pad(x, [(0, p) for p in part.padding] + [(0, 0)])
    if any(part.shift):
        x = T.roll(x, tuple(-s for s in part.shift), (0, 1, 2))
    part.mask = build_mask(part)
    return _to_cubes(x, part.cube), part


def unshift(cubes: Tensor, part: CubePartition) -> Tensor:
    """Inverse of :func:`shift`."""
    gt, gh, gw = part.grid
    t, h, w = part.cube
    d = cubes.shape[-1]
    x = cubes.reshape(gt, gh, gw, t, h, w, d).permute(0, 3, 1, 4, 2, 5, 6)
    x = x.reshape(gt * t, gh * h, gw * w, d)
    if any(part.shift):
        x = T.roll(x, part.shift, (0, 1, 2))
    if any(part.padding):
        te, he, we = part.extents
        x = x[:te, :he, :we]
    return x


def positional_embedding(v: Tensor, cube, weights: AttentionWeights) -> Tensor:
    """conv -> GELU -> conv applied to V laid out on each cube's t x h x w grid."""
    nc, n, d = v.shape
    grid = v.reshape(nc, cube[0], cube[1], cube[2], d)
    y = T.depthwise_conv3d_cl(grid, weights.pos1_w, weights.pos1_b)
    y = T.gelu(y)
    y = T.depthwise_conv3d_cl(y, weights.pos2_w, weights.pos2_b)
    return y.reshape(nc, n, d)


def cube_msa(cubes: Tensor, cfg: AttentionConfig, weights: AttentionWeights,
             mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each cube.

    For head j: softmax(Q_j K_j^T / d + mask) V_j, with d the learnable scale;
    heads are concatenated, projected by W, and the positional term P(V) is
    added.
    """
    nc, n, d = cubes.shape
    if n != cfg.tokens_per_cube or d != cfg.dim or weights.wq.shape != (d, d):
        raise ConfigurationError(
            f"cube tensor {cubes.shape} does not match config cube={cfg.cube} dim={cfg.dim} "
            f"or weights {weights.wq.shape}"
        )
    heads, hd = cfg.heads, cfg.head_dim
    q = T.matmul(cubes, weights.wq)
    k = T.matmul(cubes, weights.wk)
    v = T.matmul(cubes, weights.wv)

    def split(z):
        return z.reshape(nc, n, heads, hd).permute(0, 2, 1, 3)

    k_t = k.reshape(nc, n, heads, hd).permute(0, 2, 3, 1)
    logits = T.matmul(split(q), k_t) / weights.scale
    attn = T.softmax(logits, axis=-1, mask=None if mask is None else mask[:, None])
    out = T.matmul(attn, split(v)).permute(0, 2, 1, 3).reshape(nc, n, d)
    out = T.matmul(out, weights.wo)
    return out + positional_embedding(v, cfg.cube, weights)


def _feed_forward(x: Tensor, w: SubBlockWeights) -> Tensor:
    h = T.gelu(T.linear(x, w.ffn_w1, w.ffn_b1))
    return T.linear(h, w.ffn_w2, w.ffn_b2)


def msa_layer(x: Tensor, cfg: AttentionConfig, weights: AttentionWeights, shifted: bool) -> Tensor:
    """(T, H, W, D) -> (T, H, W, D) cube attention, optionally on the shifted lattice."""
    if shifted and any(cfg.shift):
        cubes, part = shift(x, cfg)
        return unshift(cube_msa(cubes, cfg, weights, part.mask), part)
    cubes, part = partition(x, cfg)
    mask = build_mask(part)
    return unpartition(cube_msa(cubes, cfg, weights, mask), part)


def _sub_block(x: Tensor, cfg: AttentionConfig, w: SubBlockWeights, shifted: bool) -> Tensor:
    x = x + msa_layer(T.layer_norm(x, w.norm1_g, w.norm1_b), cfg, w.attn, shifted)
    return x + _feed_forward(T.layer_norm(x, w.norm2_g, w.norm2_b), w)


def swin_block(x: Tensor, cfg: AttentionConfig, weights: SwinBlockWeights) -> Tensor:
    """Pre-norm MSA + FFN on regular cubes, then the same on shifted cubes."""
    if x.ndim != 4 or x.shape[-1] != cfg.dim:
        raise ConfigurationError(f"swin_block expects (T, H, W, {cfg.dim}), got {x.shape}")
    x = _sub_block(x, cfg, weights.regular, shifted=False)
    return _sub_block(x, cfg, weights.shifted, shifted=True)


def msa_flops(cfg: AttentionConfig, t: int, h: int, w: int) -> int:
    """4*D^2*THW + 2*thw*D*THW on the cube-padded extents."""
    padded = [e + p for e, p in zip((t, h, w), _padding_for((t, h, w), cfg.cube))]
    n = padded[0] * padded[1] * padded[2]
    d = cfg.dim
    return 4 * d * d * n + 2 * cfg.tokens_per_cube * d * n
