"""Reverse-mode automatic differentiation over dense numpy arrays.

Deliberately small: exactly the operations the warping/decoding pipeline
needs, each with an analytic backward pass that is verified against central
finite differences (see :func:`grad_check`). Graphs are built define-by-run;
every :class:`Tensor` remembers the op that produced it and its parents, and
:func:`backward` walks the tape in reverse topological order.

Precision policy: training runs in float32, gradient checking in float64
(finite differences are unreliable in float32). The dtype of a graph follows
the dtype of its leaves.
"""

from __future__ import annotations

import functools
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN/Inf while finite checks are enabled."""


class NonDifferentiableError(ValueError):
    """Raised when an op is probed exactly at a kink while kink checks are on.

    Finite differences straddle the kink and disagree with any subgradient
    choice, so the caller must offset the probe point.
    """


_finite_checks = False
_kink_checks = False
_node_counter = 0


def set_finite_checks(enabled: bool) -> None:
    """Globally enable/disable per-op NaN/Inf detection (off by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


class _kink_check_mode:
    """Context manager that turns on non-differentiable-point detection."""

    def __enter__(self):
        global _kink_checks
        self._prev = _kink_checks
        _kink_checks = True
        return self

    def __exit__(self, *exc):
        global _kink_checks
        _kink_checks = self._prev
        return False


class Tensor:
    """A dense array node in the computation tape.

    ``requires_grad`` marks trainable leaves; interior nodes always receive
    gradients during the backward sweep but only leaves keep them afterwards
    in the sense that callers read them. ``grad`` is ``None`` until a
    backward pass touches the node.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        global _node_counter
        _node_counter += 1
        self._id = _node_counter

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Constant copy of this node; gradients do not flow through it."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; the real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap_pair(a, b) -> tuple:
    """Wrap operands, coercing plain python scalars to the tensor's dtype.

    Keeps float32 graphs float32 when mixed with literals like 0.5.
    """
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return _wrap(a), _wrap(b)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward_fn = backward_fn
    out._op = op
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output of op {op!r} (node {out._id})")
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _check_broadcast(a, b, "add")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _check_broadcast(a, b, "sub")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _check_broadcast(a, b, "mul")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), backward_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap_pair(a, b)
    _check_broadcast(a, b, "div")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), backward_fn, "div")


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward_fn, "exp")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward_fn, "tanh")


def absolute(a) -> Tensor:
    a = _wrap(a)
    if _kink_checks and np.any(a.data == 0):
        raise NonDifferentiableError("absolute probed exactly at 0")

    def backward_fn(g):
        _accumulate(a, g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward_fn, "absolute")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    """max(x, slope*x) elementwise; slope must lie in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = _wrap(a)
    if _kink_checks and np.any(a.data == 0):
        raise NonDifferentiableError("leaky_relu probed exactly at 0")
    mask = a.data >= 0

    def backward_fn(g):
        _accumulate(a, g * np.where(mask, 1.0, slope).astype(g.dtype))

    return _node(np.where(mask, a.data, slope * a.data), (a,), backward_fn, "leaky_relu")


# ---------------------------------------------------------------------------
# shape / reduction ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape

    def backward_fn(g):
        _accumulate(a, g.reshape(old))

    return _node(a.data.reshape(shape), (a,), backward_fn, "reshape")


def sum_all(a) -> Tensor:
    a = _wrap(a)

    def backward_fn(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(np.asarray(a.data.sum()), (a,), backward_fn, "sum")


def mean_all(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size

    def backward_fn(g):
        _accumulate(a, np.broadcast_to(g / n, a.data.shape))

    return _node(np.asarray(a.data.mean()), (a,), backward_fn, "mean")


def sum_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    a = _wrap(a)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward_fn, "sum_axis")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def backward_fn(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward_fn, "matmul")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, backward_fn, "concat")


def slice_channels(a, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]`` along the last axis."""
    a = _wrap(a)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accumulate(a, full)

    return _node(a.data[..., start:stop].copy(), (a,), backward_fn, "slice_channels")


def spatial_diff(a, axis: int) -> Tensor:
    """Forward difference x[i+1] - x[i] along one axis (length shrinks by 1)."""
    a = _wrap(a)
    if not 0 <= axis < a.data.ndim:
        raise ShapeError(f"spatial_diff: axis {axis} out of range for rank {a.data.ndim}")
    lo = [slice(None)] * a.data.ndim
    hi = [slice(None)] * a.data.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    lo, hi = tuple(lo), tuple(hi)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[hi] += g
        full[lo] -= g
        _accumulate(a, full)

    return _node(a.data[hi] - a.data[lo], (a,), backward_fn, "spatial_diff")


# ---------------------------------------------------------------------------
# image ops
# ---------------------------------------------------------------------------

def conv2d(x, kernel, bias) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    ``x``: H x W x C_in, ``kernel``: k x k x C_in x C_out (k odd),
    ``bias``: C_out. Output is H x W x C_out.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected HxWxC input and kxkxCixCo kernel, got {x.data.shape}, {kernel.data.shape}")
    k = kernel.data.shape[0]
    if kernel.data.shape[1] != k or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kernel.data.shape[:2]}")
    h, w, c_in = x.data.shape
    if kernel.data.shape[2] != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, kernel expects {kernel.data.shape[2]}")
    c_out = kernel.data.shape[3]
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({c_out},)")

    pad = k // 2
    padded = np.zeros((h + 2 * pad, w + 2 * pad, c_in), dtype=x.data.dtype)
    padded[pad:pad + h, pad:pad + w] = x.data

    out = np.broadcast_to(bias.data, (h * w, c_out)).copy()
    for ki in range(k):
        for kj in range(k):
            patch = padded[ki:ki + h, kj:kj + w].reshape(h * w, c_in)
            out += patch @ kernel.data[ki, kj]
    out = out.reshape(h, w, c_out)

    def backward_fn(g):
        g_mat = g.reshape(h * w, c_out)
        _accumulate(bias, g_mat.sum(axis=0))
        d_kernel = np.empty_like(kernel.data)
        d_padded = np.zeros_like(padded)
        for ki in range(k):
            for kj in range(k):
                patch = padded[ki:ki + h, kj:kj + w].reshape(h * w, c_in)
                d_kernel[ki, kj] = patch.T @ g_mat
                d_padded[ki:ki + h, kj:kj + w] += (g_mat @ kernel.data[ki, kj].T).reshape(h, w, c_in)
        _accumulate(kernel, d_kernel)
        _accumulate(x, d_padded[pad:pad + h, pad:pad + w])

    return _node(out, (x, kernel, bias), backward_fn, "conv2d")


@functools.lru_cache(maxsize=64)
def _resize_matrix(n_out: int, n_in: int, dtype_str: str) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for half-pixel bilinear resampling.

    Output sample i reads input coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to the edge. Pinned by the 2 -> 4 regression [0,1] -> [0,.25,.75,1].
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(int)
    f = src - lo
    lo_c = np.clip(lo, 0, n_in - 1)
    hi_c = np.clip(lo + 1, 0, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=np.dtype(dtype_str))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo_c), 1.0 - f)
    np.add.at(mat, (rows, hi_c), f)
    return mat


def resize_bilinear(x, out_hw: tuple) -> Tensor:
    """Bilinear resampling of H x W x C to out_hw, half-pixel-centered."""
    x = _wrap(x)
    if x.data.ndim != 3:
        raise ShapeError(f"resize_bilinear: expected HxWxC, got {x.data.shape}")
    h, w, c = x.data.shape
    oh, ow = out_hw
    dt = str(x.data.dtype)
    mh = _resize_matrix(oh, h, dt)
    mw = _resize_matrix(ow, w, dt)

    tmp = np.tensordot(mh, x.data, axes=(1, 0))          # oh x w x c
    out = np.tensordot(mw, tmp, axes=(1, 1)).transpose(1, 0, 2)  # oh x ow x c

    def backward_fn(g):
        tmp_g = np.tensordot(mw.T, g, axes=(1, 1)).transpose(1, 0, 2)  # oh x w x c
        _accumulate(x, np.tensordot(mh.T, tmp_g, axes=(1, 0)))

    return _node(out, (x,), backward_fn, "resize_bilinear")


def upsample2x(x) -> Tensor:
    """Double both spatial extents of H x W x C with bilinear magnification."""
    x = _wrap(x)
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2x: expected HxWxC, got {x.data.shape}")
    h, w, _ = x.data.shape
    return resize_bilinear(x, (2 * h, 2 * w))


def bilinear_sample(image, positions) -> Tensor:
    """Sample ``image`` (H x W x C) at continuous ``positions`` (H' x W' x 2).

    positions[..., 0] is the horizontal (column) coordinate, positions[..., 1]
    the vertical (row) coordinate, in pixel units. Out-of-range positions are
    clamped to the edge; the gradient w.r.t. a clamped coordinate is zero.
    Differentiable w.r.t. both the image values and the positions.
    """
    image, positions = _wrap(image), _wrap(positions)
    if image.data.ndim != 3:
        raise ShapeError(f"bilinear_sample: image must be HxWxC, got {image.data.shape}")
    if positions.data.ndim != 3 or positions.data.shape[2] != 2:
        raise ShapeError(f"bilinear_sample: positions must be H'xW'x2, got {positions.data.shape}")
    h, w, c = image.data.shape

    if not np.all(np.isfinite(positions.data)):
        raise NonFiniteError("bilinear_sample: non-finite sampling positions")
    px = positions.data[..., 0]
    py = positions.data[..., 1]
    if _kink_checks and (np.any(px == np.floor(px)) or np.any(py == np.floor(py))):
        raise NonDifferentiableError("bilinear_sample probed exactly on the integer lattice")

    x = np.clip(px, 0.0, w - 1.0)
    y = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    fx = (x - x0).astype(image.data.dtype)[..., None]
    fy = (y - y0).astype(image.data.dtype)[..., None]

    v00 = image.data[y0, x0]
    v01 = image.data[y0, x1]
    v10 = image.data[y1, x0]
    v11 = image.data[y1, x1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)

    # clamp subgradient: zero outside the valid coordinate range
    in_x = ((px > 0.0) & (px < w - 1.0)).astype(image.data.dtype)
    in_y = ((py > 0.0) & (py < h - 1.0)).astype(image.data.dtype)

    def backward_fn(g):
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        d_img = np.zeros_like(image.data)
        np.add.at(d_img, (y0, x0), w00 * g)
        np.add.at(d_img, (y0, x1), w01 * g)
        np.add.at(d_img, (y1, x0), w10 * g)
        np.add.at(d_img, (y1, x1), w11 * g)
        _accumulate(image, d_img)

        dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * g
        dy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * g
        d_pos = np.stack([dx.sum(axis=-1) * in_x, dy.sum(axis=-1) * in_y], axis=-1)
        _accumulate(positions, d_pos.astype(positions.data.dtype))

    return _node(out, (image, positions), backward_fn, "bilinear_sample")


# ---------------------------------------------------------------------------
# backward sweep and gradient checking
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Reverse sweep from a scalar ``output``; accumulates into ``.grad``."""
    if output.data.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.data.shape}")
    order = _topo_order(output)
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def gradients(output: Tensor, leaves: Sequence[Tensor]) -> list:
    """Run :func:`backward` and return one gradient array per leaf.

    Leaves the output does not depend on get zero tensors of their shape.
    """
    backward(output)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def grad_check(op: Callable, point, step: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``op`` maps one or more Tensors to a scalar Tensor; ``point`` is one
    float64 array or a sequence of them. Kink detection is active during
    every evaluation: probing an op exactly at a non-differentiable point
    raises :class:`NonDifferentiableError` and the caller must offset.
    """
    if not 1e-7 <= step <= 1e-4:
        raise ValueError(f"grad_check step must be in [1e-7, 1e-4], got {step}")
    pts = [np.asarray(p, dtype=np.float64) for p in (point if isinstance(point, (list, tuple)) else [point])]

    with _kink_check_mode():
        leaves = [Tensor(p, requires_grad=True) for p in pts]
        out = op(*leaves)
        if out.data.size != 1:
            raise ShapeError("grad_check: op must produce a scalar")
        analytic = gradients(out, leaves)

        worst = 0.0
        for i, p in enumerate(pts):
            flat = p.reshape(-1)
            num = np.zeros_like(flat)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                f_plus = op(*[Tensor(q) for q in pts]).item()
                flat[j] = orig - step
                f_minus = op(*[Tensor(q) for q in pts]).item()
                flat[j] = orig
                num[j] = (f_plus - f_minus) / (2.0 * step)
            ana = analytic[i].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
            worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
