"""Randomized finite-difference cases shared by the tensor tests and the acceptance suite.

Each case draws its own small shapes and values from a seeded generator,
builds float64 leaves, and compares reverse-mode gradients of a random
projection of the output against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from swinvfi import attention as A
from swinvfi import losses as L
from swinvfi import network as N
from swinvfi import optics
from swinvfi import tensor as T

from oracles import central_difference, malus_quad, relative_error

F64 = np.float64


@dataclass
class GradCase:
    name: str
    make: Callable[[np.random.Generator], list[np.ndarray]]
    fn: Callable[..., T.Tensor]


def _ext(rng, lo=2, hi=4, n=2):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def _f64(obj):
    for _, t in N.named_parameters(obj):
        t.data = t.data.astype(F64)
    return obj


def _attention_weights(rng, cfg):
    w = A.AttentionWeights.init(cfg, rng)
    for name in ("wq", "wk", "wv", "wo"):
        getattr(w, name).data = rng.normal(0, 0.4, (cfg.dim, cfg.dim))
    w.pos1_b.data = rng.normal(0, 0.1, cfg.dim)
    w.pos2_b.data = rng.normal(0, 0.1, cfg.dim)
    return _f64(w)


def _swin_weights(rng, cfg):
    w = A.SwinBlockWeights.init(cfg, rng)
    for _, t in N.named_parameters(w):
        t.data = rng.normal(0, 0.3, t.shape)
    return _f64(w)


def _tiny_network(rng):
    cfg = N.ModelConfig(scales=1, dim=4, heads=(1,), cubes=((2, 2, 2),), channels=1)
    params = N.init_params(cfg, seed=int(rng.integers(1 << 30)))
    params.head.w.data = rng.normal(0, 0.2, params.head.w.shape)
    return cfg, _f64(params)


def _polarized_pair(rng, h=4, w=4):
    """Partially polarized quads with angles well inside (0, pi), target and a perturbed prediction."""
    def quad(angles):
        q = np.stack([malus_quad(a) for a in angles.ravel()], axis=-1).reshape(4, h, w)
        return 0.3 + 0.3 * q
    target = quad(rng.uniform(0.3 * np.pi, 0.7 * np.pi, (h, w)))
    pred = target + rng.normal(0, 0.02, target.shape)
    return pred, target


def _cases() -> list[GradCase]:
    c = []

    def add(name, make, fn):
        c.append(GradCase(name, make, fn))

    add("add_broadcast", lambda r: [r.normal(size=_ext(r)), r.normal(size=(1,))], lambda a, b: a + b)
    add("sub_broadcast", lambda r: [r.normal(size=(2, 3, 1)), r.normal(size=(3, 4))], lambda a, b: a - b)
    add("mul_broadcast", lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: a * b)
    add("div", lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, (3, 4))], lambda a, b: a / b)
    add("rdiv_scalar", lambda r: [r.uniform(0.5, 2.0, _ext(r))], lambda a: 2.0 / a)
    add("power", lambda r: [r.uniform(0.5, 2.0, _ext(r))], lambda a: T.power(a, 1.5))
    add("square", lambda r: [r.normal(size=_ext(r, n=3))], T.square)
    add("sqrt", lambda r: [r.uniform(0.5, 2.0, _ext(r))], T.sqrt)
    add("exp", lambda r: [r.normal(size=_ext(r))], T.exp)
    add("abs", lambda r: [r.choice([-1.0, 1.0], (3, 4)) * r.uniform(0.1, 1.0, (3, 4))], T.tensor_abs)
    add("clamp", lambda r: [r.choice([-1.0, 1.0], size=(3, 5)) * r.uniform(0.1, 1.0, (3, 5)) * 1.3],
        lambda a: T.clamp(a, -1.0, 1.0))
    add("maximum", lambda r: [r.choice([0.05, 1.0], size=(4, 4)) * r.uniform(0.5, 1.5, (4, 4))],
        lambda a: T.maximum(a, 0.3))
    add("hypot", lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))], T.hypot)
    add("atan2", lambda r: [r.normal(size=(3, 4)), r.uniform(0.2, 1.0, (3, 4))], T.atan2)
    add("gelu", lambda r: [r.normal(0, 2, size=_ext(r, n=3))], T.gelu)
    add("sum_axis", lambda r: [r.normal(size=(3, 4, 5))], lambda a: a.sum(axis=1))
    add("mean_keepdims", lambda r: [r.normal(size=(3, 4, 5))], lambda a: a.mean(axis=(0, 2), keepdims=True))
    add("matmul_2d", lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 5))], T.matmul)
    add("matmul_batched_2d", lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], T.matmul)
    add("matmul_broadcast", lambda r: [r.normal(size=(2, 1, 3, 4)), r.normal(size=(3, 4, 2))], T.matmul)
    add("linear", lambda r: [r.normal(size=(5, 4)), r.normal(size=(4, 3)), r.normal(size=(3,))], T.linear)
    add("softmax", lambda r: [r.normal(size=(3, 5))], lambda a: T.softmax(a, axis=-1))
    add("softmax_masked", lambda r: [r.normal(size=(2, 4, 4))],
        lambda a: T.softmax(a, axis=-1, mask=np.where(np.eye(4, k=1) > 0, -np.inf, 0.0)))
    add("layer_norm", lambda r: [r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))],
        T.layer_norm)
    add("reshape_permute", lambda r: [r.normal(size=(2, 3, 4))],
        lambda a: a.reshape(6, 4).permute(1, 0).reshape(2, 2, 6))
    add("getitem_strided", lambda r: [r.normal(size=(5, 6))], lambda a: a[1::2, ::3])
    add("getitem_fancy", lambda r: [r.normal(size=(5, 3))], lambda a: a[np.array([0, 2, 2, 4])])
    add("concat", lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))], lambda a, b: T.concat([a, b], axis=1))
    add("stack", lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: T.stack([a, b], axis=1))
    add("pad", lambda r: [r.normal(size=(2, 3))], lambda a: T.pad(a, [(1, 0), (2, 1)]))
    add("roll", lambda r: [r.normal(size=(3, 4, 2))], lambda a: T.roll(a, (1, -2), (0, 1)))
    add("flip", lambda r: [r.normal(size=(3, 4))], lambda a: T.flip(a, 1))
    add("conv3d_same", lambda r: [r.normal(size=(2, 3, 3, 2)), r.normal(size=(3, 3, 3, 2, 3)), r.normal(size=(3,))],
        lambda x, w, b: T.conv3d_cl(x, w, b, padding=1))
    add("conv3d_strided", lambda r: [r.normal(size=(2, 4, 4, 2)), r.normal(size=(1, 2, 2, 2, 3))],
        lambda x, w: T.conv3d_cl(x, w, stride=(1, 2, 2)))
    add("conv_transpose3d", lambda r: [r.normal(size=(2, 2, 2, 3)), r.normal(size=(1, 2, 2, 2, 3)), r.normal(size=(2,))],
        lambda x, w, b: T.conv_transpose3d_cl(x, w, b, stride=(1, 2, 2)))
    add("conv3d_channels_first", lambda r: [r.normal(size=(2, 3, 3, 3)), r.normal(size=(2, 2, 1, 3, 3))],
        lambda x, w: T.conv3d(x, w, padding=(0, 1, 1)))
    add("depthwise_small", lambda r: [r.normal(size=(2, 2, 2, 2, 3)), r.normal(size=(3, 3, 3, 3)), r.normal(size=(3,))],
        T.depthwise_conv3d_cl)
    add("depthwise_large", lambda r: [r.normal(size=(3, 5, 5, 2)), r.normal(size=(3, 3, 3, 2))],
        T.depthwise_conv3d_cl)

    def two_layer(r):
        return [r.normal(size=(5, 3)), r.normal(0, 0.7, (3, 4)), r.normal(size=(4,)), r.normal(0, 0.7, (4, 2))]
    add("two_layer_net", two_layer, lambda x, w1, b1, w2: T.mean(T.square(T.gelu(T.linear(x, w1, b1)) @ w2)))

    def msa(r):
        cfg = A.AttentionConfig((2, 2, 2), 2, 4)
        weights = _attention_weights(r, cfg)
        x = r.normal(size=(1, 8, 4))
        return [x, (cfg, weights)]
    add("cube_msa", msa, lambda x, cw: A.cube_msa(x, cw[0], cw[1]))

    def block(r):
        cfg = A.AttentionConfig((2, 2, 2), 2, 8)
        return [r.normal(size=(2, 4, 4, 8)), (cfg, _swin_weights(r, cfg))]
    add("swin_block", block, lambda x, cw: A.swin_block(x, cw[0], cw[1]))

    def net(r):
        cfg, params = _tiny_network(r)
        return [r.uniform(0, 1, (6, 1, 4, 4)), (cfg, params)]
    add("network_forward", net, lambda x, cp: N.forward(x, cp[0], cp[1]))

    def end_to_end(r):
        pred, target = _polarized_pair(r)
        return [optics.mosaic(pred)[None], optics.mosaic(target)[None]]
    add("loss_mosaic_to_aolp_dolp", end_to_end,
        lambda p, t: L.loss_combined(p, t.detach(), L.LossWeights(0.1, 1.0, 1.0, 1.0), layout="mosaic"))
    return c


CASES = _cases()


def run_case(case: GradCase, seed: int, h: float = 1e-6) -> float:
    """Largest relative error over the differentiable inputs of one case."""
    rng = np.random.default_rng(seed)
    raw = case.make(rng)
    arrays = [a for a in raw if isinstance(a, np.ndarray)]
    extras = [a for a in raw if not isinstance(a, np.ndarray)]
    projection = None

    def evaluate(values, grad=False):
        nonlocal projection
        leaves = [T.Tensor(np.array(v, dtype=F64), requires_grad=grad) for v in values]
        out = case.fn(*leaves, *extras)
        if projection is None:
            projection = np.random.default_rng(seed + 1).normal(size=out.shape)
        return T.tensor_sum(out * T.Tensor(projection)), leaves

    loss, leaves = evaluate(arrays, grad=True)
    loss.backward()
    worst = 0.0
    for i, leaf in enumerate(leaves):
        if case.name == "loss_mosaic_to_aolp_dolp" and i == 1:
            continue

        def scalar(v, i=i):
            vals = list(arrays)
            vals[i] = v
            with T.no_grad():
                return float(evaluate(vals)[0].data)

        numeric = central_difference(scalar, arrays[i], h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(numeric)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
