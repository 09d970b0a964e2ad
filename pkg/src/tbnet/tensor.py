"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable op records the
parent tensors and a closure mapping the output gradient to parent gradients;
:meth:`Tensor.backward` walks that graph in reverse topological order.
Gradients land only on leaf tensors that require them and accumulate across
calls until :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


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


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(self, _lift(other, self))

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(self, _lift(other, self))

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            return sum_all(self)
        return reduce_sum(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _topo_order(root: Tensor) -> list:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementwise ------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if b.ndim > a.ndim:
        raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape}")
    for na, nb in zip(a.shape[a.ndim - b.ndim:], b.shape):
        if nb != na and nb != 1:
            raise DimensionError(f"cannot broadcast {b.shape} onto {a.shape}")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """``a + b`` or ``a * b``; ``b`` may broadcast onto ``a``."""
    _check_broadcast(a, b)
    if kind == "add":
        def backward(g):
            return g, _unbroadcast(g, b.shape)
        return _make(a.data + b.data, (a, b), backward, "add")
    if kind == "mul":
        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb
        return _make(a.data * b.data, (a, b), backward, "mul")
    raise ContractError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        a, b = b, a
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        a, b = b, a
    return elementwise(a, b, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- shape ops ---------------------------------------------------------------

def reduce_sum(a: Tensor, axis: int) -> Tensor:
    if not 0 <= axis < a.ndim:
        raise IndexError(f"axis {axis} out of range for rank {a.ndim}")

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), backward, "reduce_sum")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axes: tuple) -> Tensor:
    """Mean over ``axes`` (dropped from the output shape)."""
    count = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        g = np.expand_dims(g, axes) / count
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(a.data.mean(axis=axes), (a,), backward, "mean")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.ascontiguousarray(a.data[index]), (a,), backward, "getitem")


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices)

    def backward(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.data, indices, axis=axis), (a,), backward, "take")


# -- convolution core -----------------------------------------------------

def _pad_spatial(x: np.ndarray, pad: tuple) -> np.ndarray:
    if not any(pad):
        return x
    out = np.zeros(x.shape[:2] + tuple(n + 2 * p for n, p in zip(x.shape[2:], pad)), dtype=x.dtype)
    out[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pad, x.shape[2:]))] = x
    return out


def _offset_slices(offset, stride, out_sp):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_sp))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: tuple, pad: tuple):
    """Patch-matrix convolution over the trailing ``d`` axes.

    ``x`` is (B, C, *S), ``w`` is (C_out, C, *K). Returns the output and the
    patch matrix (C*prod(K), B*prod(O)) for reuse in backward.
    """
    kernel = w.shape[2:]
    xp = _pad_spatial(x, pad)
    spatial = xp.shape[2:]
    for n, k in zip(spatial, kernel):
        if k > n:
            raise DimensionError(f"kernel {tuple(kernel)} larger than padded input {tuple(spatial)}")
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(spatial, kernel, stride))
    B, C = x.shape[:2]
    c_out = w.shape[0]
    cols = np.empty((C,) + tuple(kernel) + (B,) + out_sp, dtype=x.dtype)
    for offset in np.ndindex(*kernel):
        src = xp[(slice(None), slice(None)) + _offset_slices(offset, stride, out_sp)]
        cols[(slice(None),) + offset] = np.swapaxes(src, 0, 1)
    cols = cols.reshape(C * int(np.prod(kernel)), -1)
    # (B*O, C_out) orientation is markedly faster in BLAS for few output channels
    out = (cols.T @ w.reshape(c_out, -1).T).reshape((B,) + out_sp + (c_out,))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    return out, cols, out_sp


def _conv_backward(g: np.ndarray, x_shape: tuple, w: np.ndarray, cols: np.ndarray,
                   stride: tuple, pad: tuple, out_sp: tuple, need_x: bool, need_w: bool):
    B, C = x_shape[:2]
    c_out = w.shape[0]
    kernel = w.shape[2:]
    g2 = np.ascontiguousarray(np.swapaxes(g, 0, 1)).reshape(c_out, -1)
    gw = (g2 @ cols.T).reshape(w.shape) if need_w else None
    gx = None
    if need_x:
        gcols = (w.reshape(c_out, -1).T @ g2).reshape((C,) + tuple(kernel) + (B,) + tuple(out_sp))
        padded = tuple(n + 2 * p for n, p in zip(x_shape[2:], pad))
        gxp = np.zeros((B, C) + padded, dtype=g.dtype)
        for offset in np.ndindex(*kernel):
            dst = gxp[(slice(None), slice(None)) + _offset_slices(offset, stride, out_sp)]
            dst += np.swapaxes(gcols[(slice(None),) + offset], 0, 1)
        if any(pad):
            gxp = gxp[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(pad, x_shape[2:]))]
        gx = np.ascontiguousarray(gxp)
    return gx, gw


def conv_nd(x: Tensor, w: Tensor, stride: Sequence[int], pad: Sequence[int], op: str = "conv") -> Tensor:
    """Convolution of (B, C, *S) by (C_out, C, *K) over the trailing axes."""
    stride, pad = tuple(stride), tuple(pad)
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input channels {x.shape[1]} != weight in-channels {w.shape[1]} "
                             f"(x {x.shape}, w {w.shape})")
    out, cols, out_sp = _conv_forward(x.data, w.data, stride, pad)

    def backward(g):
        return _conv_backward(g, x.shape, w.data, cols, stride, pad, out_sp,
                              x.requires_grad, w.requires_grad)

    return _make(out, (x, w), backward, op)


def conv2d_spatial(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-frame 2-D convolution of a (N, T, C, H, W) clip batch.

    Rank-4 (B, C, H, W) input is also accepted.
    """
    if stride < 1 or pad < 0:
        raise ContractError(f"invalid stride {stride} / pad {pad}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be rank 4, got {w.shape}")
    if x.ndim == 4:
        return conv_nd(x, w, (stride, stride), (pad, pad), "conv2d")
    if x.ndim != 5:
        raise DimensionError(f"conv2d expects rank 4 or 5 input, got {x.shape}")
    N, T = x.shape[:2]
    if x.shape[2] != w.shape[1]:
        raise DimensionError(f"channel extent {x.shape[2]} of {x.shape} != C_in of weight {w.shape}")
    frames = reshape(x, (N * T,) + x.shape[2:])
    y = conv_nd(frames, w, (stride, stride), (pad, pad), "conv2d")
    return reshape(y, (N, T) + y.shape[1:])


# -- dense layers and losses --------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"inner extents differ: x {x.shape} vs w {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, "linear")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    N, K = logits.shape
    if labels.shape != (N,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {N}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(N), labels])

    def backward(g):
        p = softmax(logits.data)
        p[np.arange(N), labels] -= 1.0
        return (p * (g / N),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_xent")


# -- normalization ------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5, channel_axis: int = 2) -> Tensor:
    """Per-channel normalization; running statistics are updated in place when training."""
    axes = tuple(i for i in range(x.ndim) if i != channel_axis)
    bshape = [1] * x.ndim
    bshape[channel_axis] = x.shape[channel_axis]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[channel_axis]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / max(count - 1, 1)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        scale = (gamma.data * inv).reshape(bshape)
        if training:
            n = x.size // x.shape[channel_axis]
            gx = scale * (g - gb.reshape(bshape) / n - xhat * gg.reshape(bshape) / n)
        else:
            gx = scale * g
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def sample_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, channel_axis: int = 2) -> Tensor:
    """Normalize each sample over all its non-batch axes, then apply a per-channel affine.

    Statistics never depend on other samples or on running averages, so
    training and evaluation compute the same function.
    """
    axes = tuple(range(1, x.ndim))
    bshape = [1] * x.ndim
    bshape[channel_axis] = x.shape[channel_axis]
    caxes = tuple(i for i in range(x.ndim) if i != channel_axis)
    mu = x.data.mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=axes, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=caxes)
        gb = g.sum(axis=caxes)
        gh = g * gamma.data.reshape(bshape)
        gx = inv * (gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        return gx, gg, gb

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "sample_norm")


# -- initialization -----------------------------------------------------------

def he_init(shape, fan_in: int, seed=None, dtype=None, requires_grad: bool = True) -> Tensor:
    """Zero-mean Gaussian with std sqrt(2 / fan_in).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if fan_in <= 0:
        raise ContractError(f"fan_in must be positive, got {fan_in}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    data = rng.standard_normal(tuple(shape)) * np.sqrt(2.0 / fan_in)
    return Tensor(data.astype(dtype or DEFAULT_DTYPE), requires_grad=requires_grad)
