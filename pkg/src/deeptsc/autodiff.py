"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding the parents it was computed
from and a closure that pushes the output gradient back to them.
:func:`backward` walks that graph in reverse topological order.

Batched layouts used throughout: series are ``(N, C, T)``, dense inputs are
``(N, F)``. ``conv1d`` and friends also accept a single ``(C, T)`` series.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible; ``axis`` names the offending axis."""

    def __init__(self, op: str, axis: str, detail: str):
        self.op = op
        self.axis = axis
        super().__init__(f"{op}: {axis} mismatch ({detail})")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf gradients are accumulated into ``.grad`` and also returned as a
    mapping from each leaf tensor with ``requires_grad`` to its gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {n: n.grad for n in order
            if n.requires_grad and not n._parents and n.grad is not None}


# elementwise / structural ops -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _node(a.data + b.data, (a, b), "add", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), "mul", bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), "reshape",
                 lambda g: _accum(a, g.reshape(a.shape)))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), "mean",
                 lambda g: _accum(a, np.full(a.shape, g / n)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: _accum(x, g * mask))


# convolutional network ops ----------------------------------------------------

def _as_batch(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(op, "rank", f"expected (C, T) or (N, C, T), got {x.shape}")
    return x, False


def same_padding(length: int) -> tuple[int, int]:
    """Left/right zero padding for a `same` convolution; odd extra goes right."""
    left = (length - 1) // 2
    return left, length - 1 - left


def _im2col(xp: np.ndarray, length: int, stride: int, t_out: int) -> np.ndarray:
    """(N, C, T_pad) -> contiguous (N, C * L, T_out) with [n, c*L + k, t] = xp[n, c, k + stride*t]."""
    n, c, _ = xp.shape
    span = stride * (t_out - 1) + 1
    wins = sliding_window_view(xp, span, axis=2)[:, :, :length, ::stride]
    return np.ascontiguousarray(wins).reshape(n, c * length, t_out)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None,
           padding: str = "same", stride: int = 1) -> Tensor:
    """Cross-correlate ``x`` (N, C_in, T) with kernels ``w`` (C_out, C_in, L)."""
    x, squeeze = _as_batch(x, "conv1d")
    if w.ndim != 3:
        raise ShapeError("conv1d", "kernel rank", f"expected (C_out, C_in, L), got {w.shape}")
    n, c_in, t = x.shape
    c_out, wc, length = w.shape
    if wc != c_in:
        raise ShapeError("conv1d", "channel", f"input has {c_in}, kernel expects {wc}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError("conv1d", "bias", f"expected ({c_out},), got {b.shape}")
    if length < 1 or stride < 1:
        raise ValueError("conv1d: kernel length and stride must be >= 1")
    if padding == "same":
        if stride != 1:
            raise ValueError("conv1d: same padding requires stride 1")
        left, right = same_padding(length)
    elif padding == "valid":
        left = right = 0
        if t < length:
            raise ShapeError("conv1d", "time", f"length {t} shorter than kernel {length}")
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    t_out = (t + left + right - length) // stride + 1
    cols = _im2col(xp, length, stride, t_out)  # (N, C_in * L, T_out)
    w2 = w.data.reshape(c_out, c_in * length)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]

    def bw(g):
        if w.requires_grad:
            _accum(w, np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2)))
        if not x.requires_grad:
            return
        if stride == 1:
            # input gradient = correlation of the padded output gradient with flipped kernels
            gp = np.pad(g, ((0, 0), (0, 0), (length - 1 - left, length - 1 - right)))
            wf = w.data[:, :, ::-1].transpose(1, 0, 2).reshape(c_in, c_out * length)
            _accum(x, np.matmul(wf, _im2col(gp, length, 1, t)))
            return
        gcols = np.matmul(w2.T, g).reshape(n, c_in, length, t_out)
        gxp = np.zeros(xp.shape)
        span = stride * (t_out - 1) + 1
        for k in range(length):
            gxp[:, :, k:k + span:stride] += gcols[:, :, k, :]
        _accum(x, gxp[:, :, left:left + t])

    parents = (x, w) if b is None else (x, w, b)
    y = _node(out, parents, "conv1d", bw)
    return reshape(y, y.shape[1:]) if squeeze else y


def max_pool1d(x: Tensor, window: int, stride: int | None = None,
               padding: str = "valid") -> Tensor:
    if window < 1:
        raise ValueError("max_pool1d: window must be >= 1")
    stride = window if stride is None else stride
    x, squeeze = _as_batch(x, "max_pool1d")
    t = x.shape[2]
    if padding == "same":
        if stride != 1:
            raise ValueError("max_pool1d: same padding requires stride 1")
        left, right = same_padding(window)
        xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)), constant_values=-np.inf)
    else:
        left = 0
        xp = x.data
    t_out = (xp.shape[2] - window) // stride + 1
    if t_out < 1:
        raise ShapeError("max_pool1d", "time", f"length {t} shorter than window {window}")
    span = stride * (t_out - 1) + 1
    taps = [xp[:, :, k:k + span:stride] for k in range(window)]
    out = taps[0].copy()
    for tap in taps[1:]:
        np.maximum(out, tap, out=out)

    def bw(g):
        gxp = np.zeros(xp.shape)
        free = np.ones(out.shape, dtype=bool)
        for k, tap in enumerate(taps):  # first maximal tap in each window takes the gradient
            hit = free & (tap == out)
            gxp[:, :, k:k + span:stride] += np.where(hit, g, 0.0)
            free &= ~hit
        _accum(x, gxp[:, :, left:left + t])

    y = _node(out, (x,), "max_pool1d", bw)
    return reshape(y, y.shape[1:]) if squeeze else y


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over time: (N, C, T) -> (N, C), or (C, T) -> (C,)."""
    t = x.shape[-1]
    return _node(x.data.mean(axis=-1), (x,), "gap",
                 lambda g: _accum(x, np.repeat(g[..., None] / t, t, axis=-1)))


def batch_norm1d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running: tuple[np.ndarray, np.ndarray] | None = None,
                 train: bool = True, eps: float = BN_EPS,
                 momentum: float = BN_MOMENTUM):
    """Per-channel normalisation over batch and time of ``x`` (N, C, T).

    Returns ``(y, new_running)``. In train mode the batch statistics are used
    and ``new_running`` is the exponential moving average update of
    ``running`` (``None`` if no running stats were given). In eval mode the
    running statistics are used and returned unchanged.
    """
    if eps <= 0:
        raise ValueError("batch_norm1d: eps must be positive")
    x, squeeze = _as_batch(x, "batch_norm1d")
    n, c, t = x.shape
    if n == 0 or t == 0:
        raise ValueError("batch_norm1d: empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm1d", "channel", f"input has {c}, affine params {gamma.shape}")
    g_ = gamma.data[None, :, None]
    b_ = beta.data[None, :, None]
    if train:
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
        m = n * t

        def bw(g):
            _accum(gamma, (g * xhat).sum(axis=(0, 2)))
            _accum(beta, g.sum(axis=(0, 2)))
            if x.requires_grad:
                gx = g * g_
                gx = (inv[None, :, None] / m) * (
                    m * gx - gx.sum(axis=(0, 2), keepdims=True)
                    - xhat * (gx * xhat).sum(axis=(0, 2), keepdims=True))
                _accum(x, gx)
        new_running = None
        if running is not None:
            rm, rv = running
            new_running = ((1 - momentum) * rm + momentum * mu,
                           (1 - momentum) * rv + momentum * var)
    else:
        if running is None:
            raise ValueError("batch_norm1d: eval mode needs running statistics")
        rm, rv = running
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (x.data - rm[None, :, None]) * inv[None, :, None]

        def bw(g):
            _accum(gamma, (g * xhat).sum(axis=(0, 2)))
            _accum(beta, g.sum(axis=(0, 2)))
            _accum(x, g * g_ * inv[None, :, None])
        new_running = running
    y = _node(xhat * g_ + b_, (x, gamma, beta), "batch_norm1d", bw)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y, new_running


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x`` (N, F) times ``w`` (F, K) plus ``b`` (K,)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("dense", "feature", f"input has {x.shape[-1]}, weights expect {w.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, np.atleast_2d(x.data).T @ np.atleast_2d(g))
        if b is not None:
            _accum(b, g.reshape(-1, w.shape[1]).sum(axis=0))
    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, "dense", bw)


def softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(logits, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _node(p, (logits,), "softmax", bw)


def dropout(x: Tensor, rate: float, train: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), "dropout", lambda g: _accum(x, g * keep))


# losses -------------------------------------------------------------------------

def cross_entropy_loss(probs: Tensor, one_hot: np.ndarray) -> Tensor:
    """Batch-mean categorical cross-entropy of probabilities vs one-hot targets."""
    y = np.asarray(one_hot, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError("cross_entropy_loss", "class", f"probs {probs.shape}, targets {y.shape}")
    n = probs.shape[0] if probs.ndim == 2 else 1
    clamped = np.maximum(probs.data, LOG_CLAMP)
    loss = -(y * np.log(clamped)).sum() / n

    def bw(g):
        _accum(probs, g * np.where(probs.data > LOG_CLAMP, -y / (clamped * n), 0.0))
    return _node(np.asarray(loss), (probs,), "cross_entropy", bw)


def cross_entropy_with_logits(logits: Tensor, one_hot: np.ndarray) -> Tensor:
    """Batch-mean cross-entropy of softmax(logits), via log-sum-exp (no clamping)."""
    y = np.asarray(one_hot, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError("cross_entropy_with_logits", "class",
                         f"logits {logits.shape}, targets {y.shape}")
    n = logits.shape[0] if logits.ndim == 2 else 1
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = (y * (lse - z)).sum() / n

    def bw(g):
        p = np.exp(z - lse)
        _accum(logits, g * (p * y.sum(axis=-1, keepdims=True) - y) / n)
    return _node(np.asarray(loss), (logits,), "cross_entropy_with_logits", bw)


def one_hot(labels: Iterable[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    y = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred.data - y
    return _node(np.asarray((diff ** 2).mean()), (pred,), "mse",
                 lambda g: _accum(pred, g * 2.0 * diff / diff.size))
