"""Small dense tensor engine with reverse-mode differentiation.

Images are laid out row-major as (N, H, W, C). Every op records its parents
and a closure mapping the output gradient to parent gradients; `backward`
replays the reachable nodes in reverse creation order.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
# per thread, so concurrent inference in a worker pool cannot switch recording off elsewhere
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class ShapeError(ValueError):
    pass


@contextmanager
def no_grad():
    """Evaluate without recording parents (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{', grad' if self.requires_grad else ''})"

    def backward(self, grad=None):
        backward(self, grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass
class Tape:
    """Nodes reachable from a root, in creation order (a topological order)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._id))


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf that requires grad."""
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError("backward without an explicit gradient needs a scalar")
        grad = np.ones_like(loss.data)
    tape = Tape.trace(loss)
    pending: dict[int, np.ndarray] = {loss._id: np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    """Elementwise sum; `b` may also be a bias vector matching a's last axis."""
    a = _lift(a)
    b = _lift(b, a)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.shape[-1:] == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)))
    if b.data.ndim == 0:
        return _node(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum(), dtype=b.dtype)))
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    if a.shape != b.shape and b.data.ndim != 0:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}")
    if a.shape == b.shape:
        return _node(a.data - b.data, (a, b), lambda g: (g, -g))
    return _node(a.data - b.data, (a, b), lambda g: (g, np.asarray(-g.sum(), dtype=b.dtype)))


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    if a.shape == b.shape:
        return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if b.data.ndim == 0:
        return _node(
            a.data * b.data, (a, b), lambda g: (g * b.data, np.asarray((g * a.data).sum(), dtype=b.dtype))
        )
    raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.maximum(x.data, 0), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _node(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1 - y * y),))


# -------------------------------------------------------------- shape / reduce


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _node(y, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]

    def back(g):
        out = np.zeros_like(x.data)
        out[index] += g
        return (out,)

    return _node(np.array(y, copy=True), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(y, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def tsum(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(
        np.asarray(x.data.mean(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g / n),)
    )


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _node(
        np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred,), lambda g: (g * 2.0 / n * diff,)
    )


# ----------------------------------------------------------------- linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x @ W + b; a 1-D input is treated as a single row."""
    vector = x.data.ndim == 1
    if vector:
        x = reshape(x, (1, -1))
    if x.data.ndim != 2:
        x = reshape(x, (x.shape[0], -1))
    y = matmul(x, weights)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, (-1,)) if vector else y


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k, k, c), dtype=xp.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + span_h : stride, j : j + span_w : stride, :]
    return cols


def _col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    n, ho, wo, k, _, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i : i + span_h : stride, j : j + span_w : stride, :] += cols[:, :, :, i, j, :]
    return out


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4:
        raise ShapeError(f"expected H x W x C or N x H x W x C, got {x.shape}")
    return x, False


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding. kernels: K x K x C_in x C_out."""
    x, squeeze = _batched(x)
    n, h, w, c = x.shape
    k, k2, c_in, c_out = kernels.shape
    if k != k2 or c_in != c:
        raise ShapeError(f"conv2d kernel {kernels.shape} does not fit input {x.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError("kernel larger than padded input")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo).reshape(n * ho * wo, k * k * c)
    w2 = kernels.data.reshape(k * k * c, c_out)
    y = (cols @ w2).reshape(n, ho, wo, c_out)
    if bias is not None:
        y = y + bias.data

    def back(g):
        g2 = g.reshape(-1, c_out)
        dw = (cols.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        dx = None
        if x.requires_grad and stride == 1 and padding <= k - 1:
            # full correlation of g with the flipped kernel; cheaper than scattering columns
            q = k - 1 - padding
            gp = np.pad(g, ((0, 0), (q, q), (q, q), (0, 0))) if q else g
            wf = kernels.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * c_out, c)
            dx = (_im2col(gp, k, 1, h, w).reshape(n * h * w, k * k * c_out) @ wf).reshape(x.shape)
        elif x.requires_grad:
            dcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, c)
            dxp = _col2im(dcols, h + 2 * padding, w + 2 * padding, stride)
            dx = dxp[:, padding : padding + h, padding : padding + w, :] if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    out = _node(y, parents, back)
    return reshape(out, out.shape[1:]) if squeeze else out


def conv_transpose2d(
    x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of conv2d with respect to its input.

    kernels: K x K x C_out x C_in, i.e. the kernel of the convolution mapping
    C_out channels to C_in channels that this op transposes. Output size is
    (H - 1) * stride - 2 * padding + K.
    """
    x, squeeze = _batched(x)
    n, h, w, c_in = x.shape
    k, k2, c_out, c_in_k = kernels.shape
    if k != k2 or c_in_k != c_in:
        raise ShapeError(f"conv_transpose2d kernel {kernels.shape} does not fit input {x.shape}")
    hp = (h - 1) * stride + k
    wp = (w - 1) * stride + k
    ho = hp - 2 * padding
    wo = wp - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("padding removes the whole output")
    w2 = kernels.data.reshape(k * k * c_out, c_in)
    x2 = x.data.reshape(n * h * w, c_in)
    full = _col2im((x2 @ w2.T).reshape(n, h, w, k, k, c_out), hp, wp, stride)
    y = full[:, padding : padding + ho, padding : padding + wo, :] if padding else full
    if bias is not None:
        y = y + bias.data

    def back(g):
        gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else g
        gcols = _im2col(gp, k, stride, h, w).reshape(n * h * w, k * k * c_out)
        dx = (gcols @ w2).reshape(x.shape) if x.requires_grad else None
        dw = (gcols.T @ x2).reshape(kernels.shape) if kernels.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g.reshape(-1, c_out).sum(axis=0)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    out = _node(np.ascontiguousarray(y), parents, back)
    return reshape(out, out.shape[1:]) if squeeze else out


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w_input: Tensor, w_hidden: Tensor, bias: Tensor):
    """One LSTM cell update; gate order in the 4U axis is input, forget, cell, output."""
    units = h.shape[-1]
    if w_input.shape != (x.shape[-1], 4 * units) or w_hidden.shape != (units, 4 * units):
        raise ShapeError(
            f"lstm params {w_input.shape}, {w_hidden.shape} do not fit x {x.shape}, h {h.shape}"
        )
    if c.shape != h.shape or bias.shape != (4 * units,):
        raise ShapeError("lstm state/bias shape mismatch")
    vector = x.data.ndim == 1
    if vector:
        x, h, c = reshape(x, (1, -1)), reshape(h, (1, -1)), reshape(c, (1, -1))
    z = add(add(matmul(x, w_input), matmul(h, w_hidden)), bias)
    i = sigmoid(z[:, :units])
    f = sigmoid(z[:, units : 2 * units])
    g = tanh(z[:, 2 * units : 3 * units])
    o = sigmoid(z[:, 3 * units :])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    if vector:
        return reshape(h_new, (-1,)), reshape(c_new, (-1,))
    return h_new, c_new


# ------------------------------------------------------------------ optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_update(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    moments: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam step. Parameters with no gradient are left alone."""
    moments.t += 1
    c1 = 1.0 - beta1**moments.t
    c2 = 1.0 - beta2**moments.t
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return moments
