"""Interpolation network: six frames in, the middle frame out.

Pipeline: 3D-conv embedding -> N_s cascaded multi-scale transformers ->
long identity mapping (embedded input added back) -> de-embedding conv ->
temporal-reduction conv (6 frames -> 1) added to the average of the two
frames adjacent to the target.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    SwinBlockWeights,
    _fan_in_uniform,
    _padding_for,
    msa_flops,
    swin_block,
)
from .tensor import ConfigurationError, Tensor

NUM_FRAMES = 6


class CheckpointError(OSError):
    """A checkpoint file that is not in the expected format or lacks tensors."""
LAYOUTS = {1: "mosaic", 3: "rgb", 4: "quad"}
CHECKPOINT_MAGIC = b"SVFICKPT"


@dataclass(frozen=True)
class ModelConfig:
    stages: int = 1
    scales: int = 3
    dim: int = 32
    heads: tuple[int, ...] = (2, 4, 8)
    cubes: tuple[tuple[int, int, int], ...] = ((2, 4, 4), (2, 4, 4), (2, 4, 4))
    channels: int = 4
    frames: int = NUM_FRAMES
    ffn_ratio: int = 2

    def __post_init__(self):
        if self.stages < 1 or self.scales < 1:
            raise ConfigurationError(f"stages and scales must be >= 1, got {self.stages}, {self.scales}")
        if self.frames != NUM_FRAMES:
            raise ConfigurationError(f"the network takes exactly {NUM_FRAMES} input frames")
        if len(self.heads) != self.scales or len(self.cubes) != self.scales:
            raise ConfigurationError(
                f"need one head count and cube per scale ({self.scales}), got {self.heads}, {self.cubes}"
            )
        if self.channels < 1:
            raise ConfigurationError("channels must be positive")
        for lvl in range(self.scales):
            self.attention(lvl)

    @property
    def layout(self) -> str:
        return LAYOUTS.get(self.channels, "intensity")

    def width(self, level: int) -> int:
        return self.dim * 2 ** level

    def attention(self, level: int) -> AttentionConfig:
        return AttentionConfig(tuple(self.cubes[level]), self.heads[level], self.width(level))

    @property
    def spatial_multiple(self) -> int:
        return 2 ** (self.scales - 1)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["heads"] = list(self.heads)
        d["cubes"] = [list(c) for c in self.cubes]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "heads" in d:
            d["heads"] = tuple(d["heads"])
        if "cubes" in d:
            d["cubes"] = tuple(tuple(c) for c in d["cubes"])
        return cls(**d)


# -- parameters -------------------------------------------------------------

@dataclass
class ConvWeights:
    w: Tensor
    b: Tensor


@dataclass
class StageParams:
    encoder: list[SwinBlockWeights]
    down: list[ConvWeights]
    up: list[ConvWeights]
    fuse: list[ConvWeights]
    decoder: list[SwinBlockWeights]


@dataclass
class ModelParams:
    embed: ConvWeights
    stages: list[StageParams]
    deembed: ConvWeights
    head: ConvWeights


def _conv(rng, kernel, cin, cout, zero=False) -> ConvWeights:
    shape = tuple(kernel) + (cin, cout)
    fan_in = int(np.prod(kernel)) * cin
    w = np.zeros(shape, np.float32) if zero else _fan_in_uniform(rng, shape, fan_in)
    b = np.zeros(cout, np.float32) if zero else _fan_in_uniform(rng, (cout,), fan_in)
    return ConvWeights(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def _up(rng, cin, cout) -> ConvWeights:
    # transposed-conv weight laid out (k_t, k_h, k_w, C_out, C_in)
    w = _fan_in_uniform(rng, (1, 2, 2, cout, cin), cin)
    b = _fan_in_uniform(rng, (cout,), cin)
    return ConvWeights(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Truncated-normal linear weights, fan-in uniform convs, zero head conv."""
    rng = np.random.default_rng(seed)
    embed = _conv(rng, (3, 3, 3), cfg.channels, cfg.dim)
    stages = []
    for _ in range(cfg.stages):
        enc, down, up, fuse, dec = [], [], [], [], []
        for lvl in range(cfg.scales):
            enc.append(SwinBlockWeights.init(cfg.attention(lvl), rng, cfg.ffn_ratio))
            if lvl < cfg.scales - 1:
                down.append(_conv(rng, (1, 2, 2), cfg.width(lvl), cfg.width(lvl + 1)))
        for lvl in range(cfg.scales - 1):
            up.append(_up(rng, cfg.width(lvl + 1), cfg.width(lvl)))
            fuse.append(_conv(rng, (1, 1, 1), 2 * cfg.width(lvl), cfg.width(lvl)))
            dec.append(SwinBlockWeights.init(cfg.attention(lvl), rng, cfg.ffn_ratio))
        stages.append(StageParams(enc, down, up, fuse, dec))
    deembed = _conv(rng, (1, 3, 3), cfg.dim, cfg.dim)
    head = _conv(rng, (NUM_FRAMES, 3, 3), cfg.dim, cfg.channels, zero=True)
    return ModelParams(embed, stages, deembed, head)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested dataclasses/lists yielding (dotted name, tensor) leaves."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def parameter_list(params: ModelParams) -> list[Tensor]:
    return [t for _, t in named_parameters(params)]


# -- forward ----------------------------------------------------------------

def multi_scale_transformer(x: Tensor, cfg: ModelConfig, stage: StageParams) -> Tensor:
    """U-shaped encoder/decoder of Swin blocks on a (T, H, W, D) lattice.

    Encoder: Swin block, then a stride-(1,2,2) conv doubling the width.
    Decoder: stride-(1,2,2) transposed conv halving the width, concatenation
    with the same-scale encoder output, a 1x1x1 conv halving the concatenated
    depth, then a Swin block.
    """
    mult = cfg.spatial_multiple
    h, w = x.shape[1], x.shape[2]
    ph, pw = (-h) % mult, (-w) % mult
    if ph or pw:
        x = T.pad(x, [(0, 0), (0, ph), (0, pw), (0, 0)])
    skips = []
    for lvl in range(cfg.scales):
        x = swin_block(x, cfg.attention(lvl), stage.encoder[lvl])
        if lvl < cfg.scales - 1:
            skips.append(x)
            x = T.conv3d_cl(x, stage.down[lvl].w, stage.down[lvl].b, stride=(1, 2, 2))
    for lvl in reversed(range(cfg.scales - 1)):
        x = T.conv_transpose3d_cl(x, stage.up[lvl].w, stage.up[lvl].b, stride=(1, 2, 2))
        x = T.concat([x, skips[lvl]], axis=-1)
        x = T.conv3d_cl(x, stage.fuse[lvl].w, stage.fuse[lvl].b)
        x = swin_block(x, cfg.attention(lvl), stage.decoder[lvl])
    if ph or pw:
        x = x[:, :h, :w]
    return x


def identity_reference(frames) -> np.ndarray | Tensor:
    """Average of I_0 and I_1 (input slots 2 and 3)."""
    return (frames[2] + frames[3]) * 0.5


def forward(frames: Tensor, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Interpolate the middle frame.

    Args:
        frames: (6, C, H, W) ordered I_-2, I_-1, I_0, I_1, I_2, I_3.

    Returns:
        (C, H, W) estimate of I_0.5.
    """
    frames = T.as_tensor(frames)
    if frames.ndim != 4 or frames.shape[0] != NUM_FRAMES:
        raise ConfigurationError(
            f"forward expects {NUM_FRAMES} frames shaped (6, C, H, W), got {frames.shape}"
        )
    if frames.shape[1] != cfg.channels:
        raise ConfigurationError(f"config has {cfg.channels} channels, frames have {frames.shape[1]}")
    x = frames.permute(0, 2, 3, 1)
    emb = T.conv3d_cl(x, params.embed.w, params.embed.b, padding=1)
    feats = emb
    for stage in params.stages:
        feats = multi_scale_transformer(feats, cfg, stage)
    feats = feats + emb
    h = T.gelu(T.conv3d_cl(feats, params.deembed.w, params.deembed.b, padding=(0, 1, 1)))
    res = T.conv3d_cl(h, params.head.w, params.head.b, padding=(0, 1, 1))
    res = res.reshape(res.shape[1:]).permute(2, 0, 1)
    return identity_reference(frames) + res


# -- cost accounting ----------------------------------------------------------

def _conv_params(kernel, cin, cout) -> int:
    return int(np.prod(kernel)) * cin * cout + cout


def _stage_params(cfg: ModelConfig) -> int:
    n = 0
    for lvl in range(cfg.scales):
        n += SwinBlockWeights.count(cfg.width(lvl), cfg.ffn_ratio)
        if lvl < cfg.scales - 1:
            n += _conv_params((1, 2, 2), cfg.width(lvl), cfg.width(lvl + 1))
            n += _conv_params((1, 2, 2), cfg.width(lvl + 1), cfg.width(lvl))
            n += _conv_params((1, 1, 1), 2 * cfg.width(lvl), cfg.width(lvl))
            n += SwinBlockWeights.count(cfg.width(lvl), cfg.ffn_ratio)
    return n


def shared_params(cfg: ModelConfig) -> int:
    """Parameters outside the cascaded stages (embedding, de-embedding, head)."""
    return (_conv_params((3, 3, 3), cfg.channels, cfg.dim)
            + _conv_params((1, 3, 3), cfg.dim, cfg.dim)
            + _conv_params((NUM_FRAMES, 3, 3), cfg.dim, cfg.channels))


def count_params(cfg: ModelConfig) -> int:
    return shared_params(cfg) + cfg.stages * _stage_params(cfg)


def _conv_flops(kernel, cin, cout, voxels) -> int:
    return 2 * int(np.prod(kernel)) * cin * cout * voxels


def _block_flops(acfg: AttentionConfig, t, h, w, ffn_ratio) -> dict[str, int]:
    pad = _padding_for((t, h, w), acfg.cube)
    tokens = (t + pad[0]) * (h + pad[1]) * (w + pad[2])
    d = acfg.dim
    # two sub-blocks, each with MSA, P(V) (two depthwise 3^3 convs) and FFN
    return {
        "msa": 2 * msa_flops(acfg, t, h, w),
        "pos": 2 * 2 * (2 * 27 * d * tokens),
        "ffn": 2 * 2 * (2 * d * d * ffn_ratio * t * h * w),
    }


def flops_breakdown(cfg: ModelConfig, height: int, width: int) -> dict[str, int]:
    """Analytic FLOPs per module for one forward pass at the given frame size.

    Attention follows the cube-attention cost 4*D^2*THW + 2*thw*D*THW;
    convolutions count 2*k_t*k_h*k_w*C_in*C_out per output voxel (depthwise:
    2*k^3*C). Norms, activations and softmax are not counted.
    """
    t = NUM_FRAMES
    mult = cfg.spatial_multiple
    hp, wp = height + (-height) % mult, width + (-width) % mult
    out: dict[str, int] = {"embed": _conv_flops((3, 3, 3), cfg.channels, cfg.dim, t * height * width)}
    for s in range(cfg.stages):
        for lvl in range(cfg.scales):
            hh, ww = hp // 2 ** lvl, wp // 2 ** lvl
            acfg = cfg.attention(lvl)
            blocks = [("enc", lvl)] + ([("dec", lvl)] if lvl < cfg.scales - 1 else [])
            for kind, _ in blocks:
                for k, v in _block_flops(acfg, t, hh, ww, cfg.ffn_ratio).items():
                    key = f"stage{s}.{kind}{lvl}.{k}"
                    out[key] = v
            if lvl < cfg.scales - 1:
                lo = t * (hh // 2) * (ww // 2)
                out[f"stage{s}.down{lvl}"] = _conv_flops((1, 2, 2), cfg.width(lvl), cfg.width(lvl + 1), lo)
                out[f"stage{s}.up{lvl}"] = _conv_flops((1, 2, 2), cfg.width(lvl + 1), cfg.width(lvl), lo)
                out[f"stage{s}.fuse{lvl}"] = _conv_flops((1, 1, 1), 2 * cfg.width(lvl), cfg.width(lvl), t * hh * ww)
    out["deembed"] = _conv_flops((1, 3, 3), cfg.dim, cfg.dim, t * height * width)
    out["head"] = _conv_flops((NUM_FRAMES, 3, 3), cfg.dim, cfg.channels, height * width)
    return out


def count_flops(cfg: ModelConfig, height: int, width: int) -> int:
    return sum(flops_breakdown(cfg, height, width).values())


def attention_flops(cfg: ModelConfig, height: int, width: int) -> int:
    return sum(v for k, v in flops_breakdown(cfg, height, width).items() if k.endswith(".msa"))


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, extra_tensors: dict[str, np.ndarray] | None = None,
                    meta: dict[str, Any] | None = None) -> None:
    """Write manifest JSON plus named tensor records.

    Layout: magic, u64 manifest length, manifest bytes, then per record a u64
    name length, the UTF-8 name and one serialised tensor.
    """
    records = [(name, t.data) for name, t in named_parameters(params)]
    records += list((extra_tensors or {}).items())
    manifest = {"model": cfg.to_dict(), "tensors": [n for n, _ in records], "meta": meta or {}}
    body = json.dumps(manifest, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<Q", len(body)), body]
    for name, arr in records:
        nb = name.encode()
        chunks += [struct.pack("<Q", len(nb)), nb, T.tensor_to_bytes(arr)]
    # Write then rename so an interrupted save never clobbers the previous checkpoint.
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (n,) = struct.unpack_from("<Q", buf, 8)
        manifest = json.loads(buf[16:16 + n])
        off = 16 + n
        tensors = {}
        while off < len(buf):
            (ln,) = struct.unpack_from("<Q", buf, off)
            off += 8
            name = buf[off:off + ln].decode()
            off += ln
            tensors[name], off = T.tensor_from_bytes(buf, off)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return manifest, tensors


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict[str, Any], dict[str, np.ndarray]]:
    """Returns (config, params, manifest meta, non-parameter tensors)."""
    manifest, tensors = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["model"])
    params = init_params(cfg)
    for name, t in named_parameters(params):
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr
    return cfg, params, manifest.get("meta", {}), tensors
