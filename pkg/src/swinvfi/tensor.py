"""Dense N-d tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node holding references to its
inputs and a closure that maps the output gradient to input gradients. The
nodes reachable from a scalar loss form the tape; :meth:`Tensor.backward`
orders them topologically, walks them in reverse exactly once, and then drops
the graph.

Arrays default to float32. Operations preserve the dtype of their inputs, so
a graph built from float64 leaves runs entirely in float64 (used by the
finite-difference checks).
"""

from __future__ import annotations

import contextlib
import functools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_check_finite = False


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class ConfigurationError(ValueError):
    """Raised when an operation's static parameters are invalid."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise ``FloatingPointError`` as soon as any op produces NaN/Inf."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("parents", "backward", "op")

    def __init__(self, parents, backward, op):
        self.parents = parents
        self.backward = backward
        self.op = op


class Tensor:
    """An array plus optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every reachable tensor that requires grad.

        Leaf gradients accumulate across calls so several per-sample losses
        can be summed before one optimizer step.
        """
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        order = _topological_order(self)
        grads = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            t.grad = g
            in_grads = t._node.backward(g)
            for p, pg in zip(t._node.parents, in_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for t in order:
            t._node = None

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def abs(self):
        return tensor_abs(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _wrap(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _check_finite and not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite output from {op}")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._node = None
    t.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(tuple(parents), backward, op)
    return t


def _operand(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _wrap(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _wrap(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(ad / bd, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    e = float(exponent)

    def backward(g):
        return (g * e * xd ** (e - 1),)

    return _wrap(xd ** e, (x,), backward, "pow")


def square(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (2 * g * xd,)

    return _wrap(xd * xd, (x,), backward, "square")


def sqrt(x: Tensor) -> Tensor:
    """Square root whose gradient is defined as 0 at exactly 0."""
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, 0.5 * g / safe, 0).astype(out.dtype),)

    return _wrap(out, (x,), backward, "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _wrap(out, (x,), backward, "exp")


def tensor_abs(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g * np.sign(xd),)

    return _wrap(np.abs(xd), (x,), backward, "abs")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    xd = x.data
    out = np.clip(xd, lo, hi)

    def backward(g):
        keep = np.ones(xd.shape, dtype=bool)
        if lo is not None:
            keep &= xd >= lo
        if hi is not None:
            keep &= xd <= hi
        return (g * keep,)

    return _wrap(out, (x,), backward, "clamp")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` against a constant."""
    return clamp(x, lo=floor)


def hypot(a: Tensor, b: Tensor) -> Tensor:
    """sqrt(a^2 + b^2), with zero gradient at the origin."""
    ad, bd = a.data, b.data
    r = np.hypot(ad, bd)

    def backward(g):
        safe = np.where(r > 0, r, 1)
        scale = np.where(r > 0, g / safe, 0).astype(r.dtype)
        return _unbroadcast(scale * ad, ad.shape), _unbroadcast(scale * bd, bd.shape)

    return _wrap(r, (a, b), backward, "hypot")


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Four-quadrant arctangent; atan2(0, 0) = 0 with zero gradient."""
    yd, xd = y.data, x.data
    out = np.arctan2(yd, xd)

    def backward(g):
        r2 = xd * xd + yd * yd
        safe = np.where(r2 > 0, r2, 1)
        scale = np.where(r2 > 0, g / safe, 0).astype(out.dtype)
        return _unbroadcast(scale * xd, yd.shape), _unbroadcast(-scale * yd, xd.shape)

    return _wrap(out, (y, x), backward, "atan2")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    inner = c * (xd + k * xd * xd * xd)
    th = np.tanh(inner)
    out = 0.5 * xd * (1 + th)

    def backward(g):
        x2 = xd * xd
        d = 1 - th * th
        d *= xd
        d *= c * (1 + 3 * k * x2)
        d += 1 + th
        d *= 0.5
        d *= g
        return (d,)

    return _wrap(out, (x,), backward, "gelu")


# -- reductions -------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _wrap(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tensor_sum(x, axis, keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------

def _transposed(arr: np.ndarray) -> np.ndarray:
    # Stacked matmul on strided operands skips BLAS; 2-D transposes are handled natively.
    t = np.swapaxes(arr, -1, -2)
    return t if arr.ndim == 2 else np.ascontiguousarray(t)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading extents."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    ad, bd = a.data, b.data
    # A stack of rows times one matrix is a single GEMM once the stack is flattened.
    flat = ad.ndim > 2 and bd.ndim == 2
    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        try:
            out = np.matmul(ad, bd)
        except ValueError as exc:
            raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, _transposed(bd)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(_transposed(ad), g), bd.shape)
        return ga, gb

    return _wrap(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation / activations ---------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` is an additive array of 0 / -inf entries
    broadcast against ``x``; masked positions get probability 0."""
    xd = x.data if mask is None else x.data + mask.astype(x.dtype, copy=False)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _wrap(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data if gain is not None else None
    out = xhat if gd is None else xhat * gd
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]
    n = xd.shape[-1]

    def backward(g):
        gx = g if gd is None else g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        res = [dx]
        if gain is not None:
            res.append((g * xhat).reshape(-1, n).sum(axis=0))
        if bias is not None:
            res.append(g.reshape(-1, n).sum(axis=0))
        return tuple(res)

    return _wrap(out, parents, backward, "layer_norm")


# -- shape manipulation ------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} ({x.size} elements) as {shape}") from exc

    def backward(g):
        return (g.reshape(src),)

    return _wrap(out, (x,), backward, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _wrap(out, (x,), backward, "permute")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    dtype = x.dtype
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _wrap(out, (x,), backward, "getitem")


def _needs_add_at(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != s0 for i, (s, s0) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` gives (low, high) per axis."""
    widths = [tuple(w) for w in widths]
    out = np.pad(x.data, widths)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))

    def backward(g):
        return (g[slices],)

    return _wrap(out, (x,), backward, "pad")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)
    out = np.roll(x.data, shifts, axes)

    def backward(g):
        return (np.roll(g, tuple(-s for s in shifts), axes),)

    return _wrap(out, (x,), backward, "roll")


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.ascontiguousarray(np.flip(x.data, axis))

    def backward(g):
        return (np.flip(g, axis),)

    return _wrap(out, (x,), backward, "flip")


# -- convolutions (channels-last core) --------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigurationError(f"expected 3 values, got {v}")
    return v


def _conv_out_extent(n, k, s, p, axis):
    out = (n + 2 * p - k) // s + 1
    if n + 2 * p < k or out <= 0:
        raise ConfigurationError(
            f"conv3d: kernel {k} with padding {p} exceeds input extent {n} on axis {axis}"
        )
    return out


def _im2col(xp: np.ndarray, kernel, stride, out_ext) -> np.ndarray:
    """Gather patches of a padded (..., T, H, W, C) array into rows.

    Returns shape (prod(lead + out_ext), kt*kh*kw*C) ordered (kt, kh, kw, C).
    """
    lead = xp.shape[:-4]
    nl = len(lead)
    win = sliding_window_view(xp, kernel, axis=(nl, nl + 1, nl + 2))
    win = win[(slice(None),) * nl + tuple(
        slice(0, s * (o - 1) + 1, s) for s, o in zip(stride, out_ext))]
    # win: lead + (T', H', W', C, kt, kh, kw)
    perm = tuple(range(nl + 3)) + (nl + 4, nl + 5, nl + 6, nl + 3)
    cols = win.transpose(perm)
    k = kernel[0] * kernel[1] * kernel[2] * xp.shape[-1]
    return cols.reshape(-1, k)


def _col2im(cols: np.ndarray, padded_shape, kernel, stride, out_ext) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add rows back onto the padded grid."""
    lead = padded_shape[:-4]
    c = padded_shape[-1]
    cols = cols.reshape(lead + tuple(out_ext) + tuple(kernel) + (c,))
    nl = len(lead)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    ot, oh, ow = out_ext
    st, sh, sw = stride
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for d in range(kernel[2]):
                idx = (slice(None),) * nl + (
                    slice(a, a + st * (ot - 1) + 1, st),
                    slice(b, b + sh * (oh - 1) + 1, sh),
                    slice(d, d + sw * (ow - 1) + 1, sw),
                )
                out[idx] += cols[(slice(None),) * nl + (slice(None),) * 3 + (a, b, d)]
    return out


def conv3d_cl(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D convolution on channels-last input.

    Args:
        x: (..., T, H, W, C_in); leading extents are treated as a batch.
        w: (k_t, k_h, k_w, C_in, C_out).
        bias: (C_out,) or None.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim < 4 or w.ndim != 5 or w.shape[3] != x.shape[-1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {w.shape}")
    kernel = w.shape[:3]
    ext = x.shape[-4:-1]
    out_ext = tuple(_conv_out_extent(n, k, s, p, ax)
                    for ax, (n, k, s, p) in enumerate(zip(ext, kernel, stride, padding)))
    lead = x.shape[:-4]
    widths = [(0, 0)] * len(lead) + [(p, p) for p in padding] + [(0, 0)]
    xp = np.pad(x.data, widths) if any(padding) else x.data
    cols = _im2col(xp, kernel, stride, out_ext)
    cout = w.shape[4]
    wmat = w.data.reshape(-1, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + out_ext + (cout,))
    parents = [x, w] + ([bias] if bias is not None else [])
    xshape = x.shape

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat.T
            dxp = _col2im(dcols, xp.shape, kernel, stride, out_ext)
            crop = (slice(None),) * len(lead) + tuple(
                slice(p, p + n) for p, n in zip(padding, ext)) + (slice(None),)
            gx = dxp[crop] if any(padding) else dxp
            gx = gx.reshape(xshape)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _wrap(out, parents, backward, "conv3d")


def conv_transpose3d_cl(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1,
                        padding=0) -> Tensor:
    """Transposed 3D convolution (the input-adjoint of :func:`conv3d_cl`).

    Args:
        x: (..., T, H, W, C_in).
        w: (k_t, k_h, k_w, C_out, C_in) -- laid out as the forward conv that
            maps C_out -> C_in, so this op is its exact adjoint.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim < 4 or w.ndim != 5 or w.shape[4] != x.shape[-1]:
        raise ShapeError(f"conv_transpose3d: input {x.shape} incompatible with weight {w.shape}")
    kernel = w.shape[:3]
    cout = w.shape[3]
    lead = x.shape[:-4]
    in_ext = x.shape[-4:-1]
    full_ext = tuple((n - 1) * s + k for n, s, k in zip(in_ext, stride, kernel))
    out_ext = tuple(f - 2 * p for f, p in zip(full_ext, padding))
    if any(o <= 0 for o in out_ext):
        raise ConfigurationError(f"conv_transpose3d: non-positive output extent {out_ext}")
    wmat = w.data.reshape(-1, w.shape[4])  # (kt*kh*kw*C_out, C_in)
    x2 = x.data.reshape(-1, x.shape[-1])
    cols = x2 @ wmat.T
    padded_shape = lead + full_ext + (cout,)
    full = _col2im(cols, padded_shape, kernel, stride, in_ext)
    crop = (slice(None),) * len(lead) + tuple(slice(p, p + o) for p, o in zip(padding, out_ext)) + (slice(None),)
    out = np.ascontiguousarray(full[crop]) if any(padding) else full
    if bias is not None:
        out += bias.data
    parents = [x, w] + ([bias] if bias is not None else [])

    def backward(g):
        if any(padding):
            gp = np.zeros(padded_shape, dtype=g.dtype)
            gp[crop] = g
        else:
            gp = g
        gcols = _im2col(gp, kernel, stride, in_ext)  # (N_in, K)
        gx = (gcols @ wmat).reshape(x.shape) if x.requires_grad else None
        gw = (gcols.T @ x2).reshape(w.shape) if w.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(res)

    return _wrap(out, parents, backward, "conv_transpose3d")


_LOCAL_OPERATOR_MAX_VOLUME = 64


@functools.lru_cache(maxsize=32)
def _local_selection(ext, kernel) -> np.ndarray:
    """0/1 matrix mapping flattened kernel taps to a (V*V) local operator.

    Row p*V + q selects the tap that connects input site q to output site p
    under 'same' zero padding, or no tap if q is outside p's footprint.
    """
    v = ext[0] * ext[1] * ext[2]
    k = kernel[0] * kernel[1] * kernel[2]
    sel = np.zeros((v * v, k), dtype=np.float32)
    sites = np.array(np.unravel_index(np.arange(v), ext)).T
    half = np.array(kernel) // 2
    for p, sp in enumerate(sites):
        for q, sq in enumerate(sites):
            d = sq - sp + half
            if np.all(d >= 0) and np.all(d < kernel):
                sel[p * v + q, np.ravel_multi_index(tuple(d), kernel)] = 1
    return sel


def _depthwise_local(x: Tensor, w: Tensor, bias: Tensor | None) -> Tensor:
    # Small volumes: build each channel's V x V operator and apply it by batched matmul.
    ext = x.shape[-4:-1]
    kernel = w.shape[:3]
    v, c = ext[0] * ext[1] * ext[2], x.shape[-1]
    sel = _local_selection(tuple(ext), tuple(kernel)).astype(x.dtype, copy=False)
    wflat = w.data.reshape(-1, c)
    # Batched matmul on strided views falls off the BLAS path, so copy to contiguous layouts first.
    ops = np.ascontiguousarray((sel @ wflat).reshape(v, v, c).transpose(2, 0, 1))  # (C, V_out, V_in)
    xc = np.ascontiguousarray(x.data.reshape(-1, v, c).transpose(2, 1, 0))  # (C, V, M)
    outc = ops @ xc
    out = np.ascontiguousarray(outc.transpose(2, 1, 0)).reshape(x.shape)
    if bias is not None:
        out += bias.data
    parents = [x, w] + ([bias] if bias is not None else [])

    def backward(g):
        gc = np.ascontiguousarray(g.reshape(-1, v, c).transpose(2, 1, 0))
        gx = gw = None
        if x.requires_grad:
            ops_t = np.ascontiguousarray(np.swapaxes(ops, 1, 2))
            gx = np.ascontiguousarray((ops_t @ gc).transpose(2, 1, 0)).reshape(x.shape)
        if w.requires_grad:
            xc_t = np.ascontiguousarray(np.swapaxes(xc, 1, 2))
            dops = (gc @ xc_t).transpose(1, 2, 0).reshape(v * v, c)
            gw = (sel.T @ dops).reshape(w.shape)
        res = [gx, gw]
        if bias is not None:
            res.append(g.reshape(-1, c).sum(axis=0))
        return tuple(res)

    return _wrap(out, parents, backward, "depthwise_conv3d")


def depthwise_conv3d_cl(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3D convolution with 'same' zero padding and stride 1.

    Args:
        x: (..., T, H, W, C).
        w: (k_t, k_h, k_w, C) with odd kernel extents.
    """
    kernel = w.shape[:3]
    if x.ndim < 4 or w.ndim != 4 or w.shape[3] != x.shape[-1] or any(k % 2 == 0 for k in kernel):
        raise ShapeError(f"depthwise_conv3d: input {x.shape} incompatible with weight {w.shape}")
    if int(np.prod(x.shape[-4:-1])) <= _LOCAL_OPERATOR_MAX_VOLUME:
        return _depthwise_local(x, w, bias)
    pads = [k // 2 for k in kernel]
    lead = x.shape[:-4]
    nl = len(lead)
    ext = x.shape[-4:-1]
    widths = [(0, 0)] * nl + [(p, p) for p in pads] + [(0, 0)]
    xp = np.pad(x.data, widths)
    wd = w.data
    out = np.zeros(x.shape, dtype=x.dtype)
    offsets = [(a, b, d) for a in range(kernel[0]) for b in range(kernel[1]) for d in range(kernel[2])]

    def window(arr, a, b, d):
        return arr[(Ellipsis, slice(a, a + ext[0]), slice(b, b + ext[1]), slice(d, d + ext[2]), slice(None))]

    for a, b, d in offsets:
        out += window(xp, a, b, d) * wd[a, b, d]
    if bias is not None:
        out += bias.data
    parents = [x, w] + ([bias] if bias is not None else [])
    c = x.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a, b, d in offsets:
                window(gxp, a, b, d)[...] += g * wd[a, b, d]
            gx = gxp[(Ellipsis,) + tuple(slice(p, p + n) for p, n in zip(pads, ext)) + (slice(None),)]
        gw = None
        if w.requires_grad:
            g2 = g.reshape(-1, c)
            gw = np.empty(wd.shape, dtype=g.dtype)
            for a, b, d in offsets:
                gw[a, b, d] = np.einsum("nc,nc->c", window(xp, a, b, d).reshape(-1, c), g2)
        res = [gx, gw]
        if bias is not None:
            res.append(g.reshape(-1, c).sum(axis=0))
        return tuple(res)

    return _wrap(out, parents, backward, "depthwise_conv3d")


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D convolution in channels-first layout.

    Args:
        x: (C_in, T, H, W).
        w: (C_out, C_in, k_t, k_h, k_w).
        bias: (C_out,) or None.

    Output extents follow floor((n + 2p - k) / s) + 1 per axis.
    """
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected x (C,T,H,W) and w (O,C,kt,kh,kw), got {x.shape}, {w.shape}")
    out = conv3d_cl(permute(x, (1, 2, 3, 0)), permute(w, (2, 3, 4, 1, 0)), bias, stride, padding)
    return permute(out, (3, 0, 1, 2))


# -- serialisation ------------------------------------------------------------

def tensor_to_bytes(x) -> bytes:
    """Rank and extents as little-endian u64, then little-endian float32 data."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f4")
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record; returns (array, offset just past the record)."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    n = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape)
    return arr, offset + 4 * n


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
