"""Reverse-mode autodiff on top of numpy arrays.

Only the operations the CNN classifier needs are provided. Every op records a
closure that maps the output gradient to parent gradients; ``backward`` walks
the graph in reverse topological order and then frees it.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


class GraphError(RuntimeError):
    pass


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        if self._freed:
            raise GraphError("backward called twice on the same graph; run the forward pass again")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._freed = True

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor(data, _parents=tuple(parents), _op=op)
    if any(_needs_grad(p) for p in parents):
        out._backward = backward
    else:
        out._parents = ()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def check_finite(t: Tensor, name: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values produced by {name}")
    return t


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def power(a: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data ** p, (a,), bw, "pow")


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input of shape {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "linear")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    Ho, Wo = win.shape[2:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) with zero padding, via im2col."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects B x C x H x W input, got shape {x.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels but the kernel expects {Cw}")
    p = padding
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    cols = _im2col(_pad(x.data, p), kh, kw)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if _needs_grad(x):
            # input gradient = full correlation of g with the flipped, channel-swapped kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, O * kh * kw)
            gcols = _im2col(_pad(np.ascontiguousarray(g), kh - 1 - p), kh, kw)
            gx = (gcols @ wflip.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Gradient goes to the first maximum of each window."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2d needs even spatial dims, got {H}x{W}")
    d = x.data
    views = (d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def bw(g):
        gx = np.zeros(d.shape, dtype=x.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (r, c), v in zip(((0, 0), (0, 1), (1, 0), (1, 1)), views):
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, :, r::2, c::2] = g * hit
        return (gx,)

    return _make(out, (x,), bw, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    scale = 1.0 / (H * W)

    def bw(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw, "gap")


# losses --------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def weighted_cross_entropy(logits: Tensor, labels, class_weights) -> Tensor:
    """Class-weighted cross-entropy, normalised by the summed weight of the batch.

    ``class_weights`` is a length-K sequence (or a mapping class-id -> weight).
    """
    B, K = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= K):
        bad = int(y[(y < 0) | (y >= K)][0])
        raise ValueError(f"label {bad} out of range for {K} classes")
    if isinstance(class_weights, dict):
        missing = [c for c in range(K) if c not in class_weights]
        if missing:
            raise ValueError(f"no weight for classes {missing}")
        w = np.array([class_weights[c] for c in range(K)], dtype=np.float64)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (K,):
            raise ValueError(f"expected {K} class weights, got {w.shape}")
    wy = w[y].astype(logits.dtype)
    wsum = wy.sum()
    if wsum <= 0:
        raise ValueError("sum of sample weights in the batch is zero")
    logp = log_softmax(logits.data)
    nll = -logp[np.arange(B), y]
    loss = np.asarray((wy * nll).sum() / wsum, dtype=logits.dtype)

    def bw(g):
        d = np.exp(logp)
        d[np.arange(B), y] -= 1.0
        return (d * (wy / wsum)[:, None] * g,)

    return _make(loss, (logits,), bw, "weighted_ce")
