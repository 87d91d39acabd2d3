"""Minimal dense-tensor engine with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and recording is enabled) the output keeps a reference to its
inputs plus a closure mapping the output gradient to input gradients. The
resulting graph is the tape: :meth:`Tensor.backward` orders it
topologically, visits each node once and releases it.

Operations also report an analytic FLOP count to the active
:class:`FlopCounter`, if any, which is how model costs are measured.
"""
from __future__ import annotations

import contextlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, InputError, UsageError

_state = {"dtype": np.dtype(np.float32), "grad": True, "counter": None}


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradient checks)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


# --------------------------------------------------------------------------
# FLOP accounting


class FlopCounter:
    """Accumulates analytic FLOPs per named scope.

    Conventions: one multiply-accumulate is two FLOPs, elementwise arithmetic
    and transcendental functions cost one FLOP per output element, softmax
    costs four per element (shift, exp, sum, divide), layer norm seven,
    data movement (reshape, indexing, concatenation) is free.
    """

    def __init__(self):
        self.by_scope: dict[str, int] = defaultdict(int)
        self._stack = ["other"]

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def add(self, n) -> None:
        self.by_scope[self._stack[-1]] += int(n)

    def __enter__(self):
        self._previous = _state["counter"]
        _state["counter"] = self
        return self

    def __exit__(self, *exc):
        _state["counter"] = self._previous


@contextlib.contextmanager
def flop_scope(name: str):
    counter = _state["counter"]
    if counter is None:
        yield
        return
    counter._stack.append(name)
    try:
        yield
    finally:
        counter._stack.pop()


def _flops(n) -> None:
    counter = _state["counter"]
    if counter is not None:
        counter.add(n)


# --------------------------------------------------------------------------
# Tensor


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data
    return np.asarray(data, dtype=_state["dtype"])


class Tensor:
    """Dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- reverse pass ------------------------------------------------------
    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaves are tensors created with ``requires_grad=True``; their grads
        accumulate across calls. The recorded graph is released afterwards.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise UsageError("this tape has already been consumed by backward()")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor requiring grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._parents = ()
        self._consumed = True

    # -- operators ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

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

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _state["dtype"]))


def _node(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        b = _wrap(b, a)
    else:
        b = _wrap(b)
        a = _wrap(a, b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data + b.data
    _flops(out.size)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data - b.data
    _flops(out.size)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data * b.data
    _flops(out.size)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    _flops(out.size)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    _flops(a.size)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    _flops(a.size)
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _flops(a.size)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _flops(a.size)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    _flops(a.size)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    _flops(a.size)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(x.dtype, copy=False)
    _flops(3 * a.size)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU; smooth, which keeps finite-difference checks clean."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    _flops(8 * a.size)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(out, (a,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    _flops(a.size)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), backward)


# --------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim == 1 and b.ndim >= 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _flops(2 * out.size * a.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _flops(4 * x.size)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    _flops(7 * x.size)

    def backward(g):
        gx = ggain = gbias = None
        lead = tuple(range(x.ndim - 1))
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), backward)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [C,H,W] with ``kernels`` [K,C,h,w]."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if x.ndim != 3 or kernels.ndim != 4 or x.shape[0] != kernels.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernels {kernels.shape}")
    C, H, W = x.shape
    K, _, kh, kw = kernels.shape
    p, s = padding, stride
    Hp, Wp = H + 2 * p, W + 2 * p
    if kh > Hp or kw > Wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo, C * kh * kw)
    wmat = kernels.data.reshape(K, -1)
    out = (cols @ wmat.T).T.reshape(K, Ho, Wo)
    _flops(2 * K * C * kh * kw * Ho * Wo)
    parents = (x, kernels)
    if bias is not None:
        out = out + bias.data[:, None, None]
        _flops(K * Ho * Wo)
        parents = (x, kernels, bias)

    def backward(g):
        gmat = g.reshape(K, Ho * Wo)
        gx = gk = None
        if x.requires_grad:
            dcols = (gmat.T @ wmat).reshape(Ho, Wo, C, kh, kw)
            dxp = np.zeros((C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += \
                        dcols[:, :, :, i, j].transpose(2, 0, 1)
            gx = dxp[:, p:p + H, p:p + W]
        if kernels.requires_grad:
            gk = (gmat @ cols).reshape(kernels.shape)
        if bias is None:
            return gx, gk
        return gx, gk, gmat.sum(axis=1)

    return _node(out, parents, backward)


# --------------------------------------------------------------------------
# bilinear sampling


def _corner_setup(px: np.ndarray, py: np.ndarray, h: int, w: int):
    """Pixel-centre bilinear corners for normalised points; cell i is centred at (i+0.5)/n."""
    u = px * w - 0.5
    v = py * h - 0.5
    inside_u = (u >= 0) & (u <= w - 1)
    inside_v = (v >= 0) & (v <= h - 1)
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    x0 = np.clip(np.floor(u), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0).astype(px.dtype)
    fy = (v - y0).astype(py.dtype)
    return x0, x1, y0, y1, fx, fy, inside_u, inside_v


def multiscale_sample(values: Tensor, level_shapes: Sequence[tuple[int, int]], points: Tensor) -> Tensor:
    """Bilinearly sample flattened multi-level value maps.

    values: [G, S, C] where S concatenates every level's h*w cells row-major.
    points: [G, N, L, K, 2] normalised (x, y) per level, inside the unit square.
    Returns [G, N, L, K, C]. Differentiable in both ``values`` and ``points``.

    Sampling is linear in ``values``, so it is applied as a sparse
    interpolation matrix with four entries per sample point.
    """
    G, S, C = values.shape
    Gp, N, L, K, two = points.shape
    if Gp != G or two != 2 or L != len(level_shapes):
        raise DimensionError(f"multiscale_sample shapes: values {values.shape}, points {points.shape}")
    if S != sum(h * w for h, w in level_shapes):
        raise DimensionError(f"value rows {S} do not match level shapes {list(level_shapes)}")
    pts = points.data
    dtype = values.dtype
    idx = np.empty((G, N, L, K, 4), dtype=np.int64)
    fxs = np.empty((G, N, L, K), dtype=dtype)
    fys = np.empty_like(fxs)
    du = np.empty_like(fxs)
    dv = np.empty_like(fxs)
    goff = (np.arange(G) * S).reshape(G, 1, 1)
    start = 0
    for lvl, (h, w) in enumerate(level_shapes):
        x0, x1, y0, y1, fx, fy, iu, iv = _corner_setup(pts[:, :, lvl, :, 0], pts[:, :, lvl, :, 1], h, w)
        base = goff + start
        idx[:, :, lvl, :, 0] = base + y0 * w + x0
        idx[:, :, lvl, :, 1] = base + y0 * w + x1
        idx[:, :, lvl, :, 2] = base + y1 * w + x0
        idx[:, :, lvl, :, 3] = base + y1 * w + x1
        fxs[:, :, lvl], fys[:, :, lvl] = fx, fy
        du[:, :, lvl] = w * iu * (w > 1)
        dv[:, :, lvl] = h * iv * (h > 1)
        start += h * w
    m = G * N * L * K
    fx, fy = fxs.reshape(m, 1), fys.reshape(m, 1)
    wts = np.concatenate([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    cols = idx.reshape(-1)
    indptr = np.arange(0, 4 * m + 1, 4)

    def interp(weights):
        return sparse.csr_matrix((weights.reshape(-1), cols, indptr), shape=(m, G * S))

    A = interp(wts)
    flat = values.data.reshape(G * S, C)
    out = (A @ flat).reshape(G, N, L, K, C)
    _flops(m * (7 * C + 12))

    def backward(g):
        gv = gp = None
        gflat = g.reshape(m, C)
        if values.requires_grad:
            gv = (A.T @ gflat).reshape(G, S, C).astype(dtype, copy=False)
        if points.requires_grad:
            one = np.ones_like(fx)
            dfx = interp(np.concatenate([-(1 - fy), 1 - fy, -fy, fy], axis=1)) @ flat
            dfy = interp(np.concatenate([-(1 - fx), -fx, 1 - fx, fx * one], axis=1)) @ flat
            gx = (dfx * gflat).sum(-1) * du.reshape(-1)
            gy = (dfy * gflat).sum(-1) * dv.reshape(-1)
            gp = np.stack([gx, gy], axis=-1).reshape(points.shape).astype(points.dtype, copy=False)
        return gv, gp

    return _node(np.asarray(out, dtype=dtype), (values, points), backward)


def bilinear_sample(feature_map: Tensor, points) -> Tensor:
    """Sample a [C,H,W] map at normalised (x, y) points; returns [P, C]."""
    if feature_map.ndim != 3:
        raise DimensionError(f"bilinear_sample expects [C,H,W], got {feature_map.shape}")
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=feature_map.dtype))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"points must be [P,2], got {pts.shape}")
    if np.any(pts.data < 0) or np.any(pts.data > 1) or not np.all(np.isfinite(pts.data)):
        raise InputError("bilinear_sample points must lie in the unit square")
    C, H, W = feature_map.shape
    values = reshape(transpose(reshape(feature_map, (C, H * W)), (1, 0)), (1, H * W, C))
    out = multiscale_sample(values, [(H, W)], reshape(pts, (1, pts.shape[0], 1, 1, 2)))
    return reshape(out, (pts.shape[0], C))


# --------------------------------------------------------------------------
# attention


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor, heads: int,
                         weights: Mapping[str, Tensor] | None = None, mask=None) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    Inputs are [..., N, D]. ``weights`` may hold projections ``wq, bq, wk, bk,
    wv, bv, wo, bo`` ([D, D] / [D]); any missing projection is the identity.
    ``mask`` is a boolean array broadcastable to [..., Nq, Nk], True = may attend.
    """
    D = queries.shape[-1]
    if heads < 1 or D % heads:
        raise ConfigurationError(f"feature dim {D} is not divisible by {heads} heads")
    if keys.shape[-1] != D or values.shape[-1] != D or keys.shape[-2] != values.shape[-2]:
        raise DimensionError(f"attention shapes q{queries.shape} k{keys.shape} v{values.shape}")
    weights = weights or {}

    def project(x, w, b):
        if w in weights:
            x = matmul(x, weights[w])
        if b in weights:
            x = add(x, weights[b])
        return x

    dh = D // heads

    def split(x):
        lead = x.shape[:-1]
        x = reshape(x, lead + (heads, dh))
        return swapaxes(x, -2, -3)  # [..., heads, N, dh]

    q = split(project(queries, "wq", "bq"))
    k = split(project(keys, "wk", "bk"))
    v = split(project(values, "wv", "bv"))
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        bias = np.where(mask, 0.0, -1e9).astype(scores.dtype)
        scores = add(scores, Tensor(np.expand_dims(bias, -3)))
    attn = softmax(scores, axis=-1)
    ctx = swapaxes(matmul(attn, v), -2, -3)
    ctx = reshape(ctx, ctx.shape[:-2] + (D,))
    return project(ctx, "wo", "bo")


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradientReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def worst(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None


def check_gradients(graph_builder: Callable[[Mapping[str, Tensor]], Tensor],
                    params: Mapping[str, Tensor], tolerance: float = 1e-4, step: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0, floor: float = 1e-6) -> GradientReport:
    """Compare backward gradients with central finite differences.

    ``graph_builder(params)`` must return a scalar loss. The error for a
    parameter is ``|g_bp - g_fd| / max(|g_bp|, |g_fd|, floor)`` in the
    Euclidean norm over the checked entries, so gradients that vanish
    identically are compared in absolute terms. At most ``max_entries``
    entries per parameter are probed (chosen with ``seed``).
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = graph_builder(params)
    loss.backward()
    report = GradientReport(tolerance=tolerance)
    with no_grad():
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
            numeric = np.empty(len(entries))
            for n, i in enumerate(entries):
                orig = flat[i]
                flat[i] = orig + step
                up = float(graph_builder(params).data)
                flat[i] = orig - step
                down = float(graph_builder(params).data)
                flat[i] = orig
                numeric[n] = (up - down) / (2 * step)
            bp = analytic.reshape(-1)[entries]
            scale = max(np.linalg.norm(bp), np.linalg.norm(numeric), floor)
            report.errors[name] = float(np.linalg.norm(bp - numeric) / scale)
    return report


def parameters_from(arrays: Mapping[str, np.ndarray] | Iterable, dtype=None) -> dict[str, Tensor]:
    """Wrap named arrays as leaf tensors requiring grad."""
    items = arrays.items() if isinstance(arrays, Mapping) else arrays
    return {k: Tensor(np.array(v, dtype=dtype or _state["dtype"]), requires_grad=True, name=k)
            for k, v in items}
