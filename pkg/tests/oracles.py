"""Independent reference implementations used by the tests.

Nothing here imports the package; each routine is written the slow, obvious
way so it can check the optimized code paths.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.ndimage import correlate


def central_difference(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def gelu_tanh(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def dense_attention(x, wq, wk, wv, wo, scale, heads, cube, pos1_w, pos1_b, pos2_w, pos2_b):
    """Global multi-head attention over one cube of tokens, head by head.

    ``x`` is (t*h*w, D) in t-major order; positional kernels are (3, 3, 3, D)
    cross-correlations with zero padding.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    hd = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    outs = []
    for j in range(heads):
        cols = slice(j * hd, (j + 1) * hd)
        logits = q[:, cols] @ k[:, cols].T / scale
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        outs.append(p @ v[:, cols])
    out = np.concatenate(outs, axis=1) @ wo

    grid = v.reshape(*cube, d)
    pos = np.empty_like(grid)
    for c in range(d):
        pos[..., c] = correlate(grid[..., c], pos1_w[..., c], mode="constant", cval=0.0) + pos1_b[c]
    pos = gelu_tanh(pos)
    pos2 = np.empty_like(pos)
    for c in range(d):
        pos2[..., c] = correlate(pos[..., c], pos2_w[..., c], mode="constant", cval=0.0) + pos2_b[c]
    return out + pos2.reshape(n, d)


def shifted_mask_by_enumeration(extents, cube, shift) -> np.ndarray:
    """Boolean (num_cubes, n, n) array of blocked pairs, by visiting every pair.

    The lattice is padded up to a multiple of the cube and rolled back by
    ``shift``. Two tokens in the same rolled cube may attend when their offset
    in the rolled lattice equals their offset in the original lattice on every
    axis (the roll did not wrap one of them around a border relative to the
    other), and the key is a real token rather than padding. A token may
    always attend to itself.
    """
    padded = [e + (-e) % c for e, c in zip(extents, cube)]
    grid = [p // c for p, c in zip(padded, cube)]
    blocked = []
    for g in itertools.product(*(range(n) for n in grid)):
        sites = [tuple(gi * ci + oi for gi, ci, oi in zip(g, cube, o))
                 for o in itertools.product(*(range(c) for c in cube))]
        n = len(sites)
        cube_blocked = np.zeros((n, n), dtype=bool)
        for a, ra in enumerate(sites):
            oa = [(r + s) % p for r, s, p in zip(ra, shift, padded)]
            for b, rb in enumerate(sites):
                if a == b:
                    continue
                ob = [(r + s) % p for r, s, p in zip(rb, shift, padded)]
                same_offset = all(oa[i] - ob[i] == ra[i] - rb[i] for i in range(3))
                key_real = all(ob[i] < extents[i] for i in range(3))
                cube_blocked[a, b] = not (same_offset and key_real)
        blocked.append(cube_blocked)
    return np.array(blocked)


def gaussian_taps(sigma: float = 1.5, radius: int = 5) -> np.ndarray:
    u = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-u * u / (2 * sigma * sigma))
    return g / g.sum()


def _reflect_index(i: int, n: int) -> int:
    """Half-sample symmetric border extension (d c b a | a b c d | d c b a)."""
    m = i % (2 * n)
    return m if m < n else 2 * n - 1 - m


def ssim_direct(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Single-channel SSIM with explicit per-pixel windowed sums."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    h, w = a.shape
    taps = gaussian_taps()
    r = len(taps) // 2
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    total = 0.0
    for i in range(h):
        for j in range(w):
            mx = my = sxx = syy = sxy = 0.0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    wt = taps[u + r] * taps[v + r]
                    x = a[_reflect_index(i + u, h), _reflect_index(j + v, w)]
                    y = b[_reflect_index(i + u, h), _reflect_index(j + v, w)]
                    mx += wt * x
                    my += wt * y
                    sxx += wt * x * x
                    syy += wt * y * y
                    sxy += wt * x * y
            vx, vy, cov = sxx - mx * mx, syy - my * my, sxy - mx * my
            total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return total / (h * w)


def conv3d_direct(x: np.ndarray, w: np.ndarray, stride=(1, 1, 1), padding=(0, 0, 0)) -> np.ndarray:
    """Channels-last 3D cross-correlation by explicit loops.

    ``x`` is (T, H, W, Cin), ``w`` is (kt, kh, kw, Cin, Cout).
    """
    xp = np.pad(x, [(p, p) for p in padding] + [(0, 0)])
    kt, kh, kw, _, cout = w.shape
    out_ext = [(xp.shape[i] - k) // s + 1 for i, (k, s) in enumerate(zip((kt, kh, kw), stride))]
    out = np.zeros(out_ext + [cout])
    for t, i, j in itertools.product(*(range(n) for n in out_ext)):
        patch = xp[t * stride[0]:t * stride[0] + kt, i * stride[1]:i * stride[1] + kh,
                   j * stride[2]:j * stride[2] + kw]
        out[t, i, j] = np.einsum("abcd,abcde->e", patch, w)
    return out


def adam_reference(theta, grads, lr, beta1=0.9, beta2=0.99, eps=1e-8):
    """Scalar-loop Adam over a sequence of gradients; returns the final parameters."""
    theta = [float(t) for t in np.ravel(theta)]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for step, g in enumerate(grads, start=1):
        for i, gi in enumerate(np.ravel(g)):
            m[i] = beta1 * m[i] + (1 - beta1) * gi
            v[i] = beta2 * v[i] + (1 - beta2) * gi * gi
            mhat = m[i] / (1 - beta1 ** step)
            vhat = v[i] / (1 - beta2 ** step)
            theta[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return np.array(theta)


def malus_quad(angle: float, source: float = 1.0) -> np.ndarray:
    """Analyzer intensities (I0, I45, I90, I135) of a fully polarized source."""
    return np.array([source * math.cos(angle - math.radians(t)) ** 2 for t in (0, 45, 90, 135)])
