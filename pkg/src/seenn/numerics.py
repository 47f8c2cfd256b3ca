"""Dense tensors with a small reverse-mode autodiff tape.

Only the operations the spiking pipeline needs are supported. Every op that
touches a tensor with ``requires_grad`` appends one entry to the active
:class:`Tape`; :meth:`Tensor.backward` replays those entries in reverse.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor", "Tape", "rowstable_matmul", "ShapeError", "ConfigError",
    "matmul", "conv2d", "im2col", "softmax", "log_softmax", "cross_entropy",
    "batch_norm", "avg_pool2d", "relu", "mean", "detach",
    "SGD", "sgd_step", "cosine_lr",
    "seed", "rng", "set_precision", "get_dtype", "no_grad", "get_tape",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An operation was configured with impossible parameters."""


_DTYPE = np.float64
_RNG = np.random.default_rng(0)  # PCG64


def set_precision(bits):
    global _DTYPE
    if bits not in (32, 64):
        raise ConfigError(f"precision must be 32 or 64, got {bits}")
    _DTYPE = np.float64 if bits == 64 else np.float32


def get_dtype():
    return _DTYPE


def seed(value):
    """Reseed the global generator."""
    global _RNG
    _RNG = np.random.default_rng(int(value))
    return _RNG


def rng():
    return _RNG


class Tape:
    """Ordered record of differentiable ops.

    Recording order is a topological order of the graph, so the reverse sweep
    only needs one pass.
    """

    def __init__(self):
        self.ops = []
        self.enabled = True

    def record(self, out, parents, backward):
        self.ops.append((out, parents, backward))

    def clear(self):
        self.ops.clear()

    def backward(self, root, grad=None):
        if grad is None:
            grad = np.ones_like(root.data)
        root.grad = grad if root.grad is None else root.grad + grad
        for out, parents, backward in reversed(self.ops):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if g.shape != p.data.shape:
                    g = _unbroadcast(g, p.data.shape)
                p.grad = g if p.grad is None else p.grad + g
        self.clear()


_TAPE = Tape()


def get_tape():
    return _TAPE


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data, parents, backward):
    out = Tensor(data)
    if _TAPE.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPE.record(out, parents, backward)
    return out


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        _TAPE.backward(self, grad)

    def zero_grad(self):
        self.grad = None

    # elementwise arithmetic -------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        return _make(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        return _make(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return _make(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division is only supported by a constant")
        return self * (1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)

    # shape ops ----------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(out, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def __getitem__(self, idx):
        shape = self.data.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            return (full,)

        return _make(self.data[idx], (self,), backward)


def detach(x):
    return Tensor(x.data)


def mean(x, axis=None, keepdims=False):
    return x.mean(axis=axis, keepdims=keepdims)


ROW_BLOCK = 64


def rowstable_matmul(A, B):
    """``A @ B`` computed in zero-padded blocks of ``ROW_BLOCK`` rows.

    BLAS picks different kernels for different row counts, so a row's result can
    change with batch size. Fixed-shape blocks make every row's result depend
    only on that row, which early exit needs when it drops finished samples.
    """
    m = A.shape[0]
    if m == ROW_BLOCK:
        return A @ B
    pad = (-m) % ROW_BLOCK
    if pad:
        A = np.concatenate([A, np.zeros((pad, A.shape[1]), dtype=A.dtype)])
    out = np.empty((A.shape[0], B.shape[1]), dtype=np.result_type(A, B))
    for i in range(0, A.shape[0], ROW_BLOCK):
        np.matmul(A[i:i + ROW_BLOCK], B, out=out[i:i + ROW_BLOCK])
    return out[:m]


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return _make(rowstable_matmul(A, B), (a, b), lambda g: (g @ B.T, A.T @ g))


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def im2col(x, kh, kw, stride, padding):
    """Unfold ``x`` (N,C,H,W) into rows of receptive fields.

    Returns ``(cols, (Ho, Wo))`` with ``cols`` of shape (N*Ho*Wo, C*kh*kw).
    """
    N, C, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if (Hp - kh) % stride or (Wp - kw) % stride:
        raise ConfigError(
            f"non-integral conv output: input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    return cols, (Ho, Wo)


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of x (N,C,H,W) with w (F,C,kh,kw), zero padded."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    cols, (Ho, Wo) = im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(F, -1)
    out = rowstable_matmul(cols, wmat.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (g2.T @ cols).reshape(w.data.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            dxp = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + H, padding:padding + W]
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), backward)


def avg_pool2d(x, k):
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    N, C, H, W = x.shape
    if H % k or W % k:
        raise ConfigError(f"pool size {k} does not divide input {H}x{W}")
    out = x.data.reshape(N, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g,)

    return _make(out, (x,), backward)


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x):
    s = _softmax_np(x.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy against integer labels.

    ``reduction="none"`` returns the per-sample losses.
    """
    labels = np.asarray(labels, dtype=np.int64)
    N, M = logits.shape
    if labels.shape != (N,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise IndexError(f"label out of range [0, {M})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(N)
    losses = -logp[rows, labels]
    probs = np.exp(logp)
    probs[rows, labels] -= 1.0  # softmax - onehot

    if reduction == "none":
        return _make(losses, (logits,), lambda g: (probs * g[:, None],))
    if reduction != "mean":
        raise ConfigError(f"unknown reduction {reduction!r}")
    return _make(np.asarray(losses.mean()), (logits,), lambda g: (probs * (g / N),))


def batch_norm(x, gamma, beta, eps=1e-5):
    """Normalize with batch statistics over every axis except axis 1.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays
    for running-average bookkeeping.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(bshape)
    out = g_ * xhat + beta.data.reshape(bshape)
    m = x.data.size // x.shape[1]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        dx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    out_t = _make(out, (x, gamma, beta), backward)
    return out_t, mu.reshape(-1), var.reshape(-1)


# optimisation -----------------------------------------------------------------

def sgd_step(params, grads, velocities, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD with heavy-ball momentum and L2 weight decay.

    ``velocities`` is a list of arrays (updated in place) parallel to ``params``.
    """
    if lr < 0:
        raise ConfigError("lr must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError("momentum must lie in [0, 1)")
    for p, g, v in zip(params, grads, velocities):
        if g is None:
            g = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


class SGD:
    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        sgd_step([p.data for p in self.params], [p.grad for p in self.params],
                 self.velocity, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
        _TAPE.clear()


def cosine_lr(epoch, total_epochs, lr0):
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0
