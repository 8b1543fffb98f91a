"""Reverse-mode tape autodiff on numpy arrays.

Each op builds a Tensor node holding its inputs and a closure that routes
the output gradient to them. ``backward`` walks the graph in reverse
topological order, accumulating gradients additively, so shared nodes
(for example LSTM parameters used at every unrolled step) collect the sum
of all their contributions.

Broadcasting is deliberately narrow: ``add`` accepts equal shapes or a
trailing-axis bias vector, nothing else.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class DebugNanCheck:
    """Context manager enabling a finiteness assertion after every op."""

    enabled = False

    def __enter__(self):
        DebugNanCheck.enabled = True
        return self

    def __exit__(self, *exc):
        DebugNanCheck.enabled = False
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if DebugNanCheck.enabled and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values after op {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate .grad for every tensor the scalar `loss` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    # iterative depth-first topological sort (LSTM graphs are deep)
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
        return _node("add", a.data + b.data, (a, b), bw)
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bw(g):
            _accum(a, g)
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
        return _node("add", a.data + b.data, (a, b), bw)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _node("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _node("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    def bw(g):
        _accum(a, g * s)
    return _node("scale", a.data * s, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _node("matmul", a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)
    return _node("relu", np.where(mask, x.data, 0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(x, g * y * (1.0 - y))
    return _node("sigmoid", y, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        _accum(x, g * (1.0 - y * y))
    return _node("tanh", y, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g / x.data)
    return _node("log", np.log(x.data), (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        _accum(x, g * y)
    return _node("exp", y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))
    return _node("softmax", y, (x,), bw)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)

def total_sum(x: Tensor) -> Tensor:
    val = x.data.sum(dtype=np.float64)

    def bw(g):
        _accum(x, np.full_like(x.data, g if np.isscalar(g) else g.item()))
    return _node("sum", np.asarray(val, dtype=x.dtype), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    val = x.data.sum(dtype=np.float64) / n

    def bw(g):
        _accum(x, np.full_like(x.data, (g if np.isscalar(g) else g.item()) / n))
    return _node("mean", np.asarray(val, dtype=x.dtype), (x,), bw)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))
    return _node("reshape", x.data.reshape(shape), (x,), bw)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets, offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accum(p, g[tuple(index)])
    return _node("concat", np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accum(x, full)
    return _node("slice_axis", x.data[index], (x,), bw)


def index_axis(x: Tensor, axis: int, i: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = i
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accum(x, full)
    return _node("index_axis", x.data[index], (x,), bw)


# ---------------------------------------------------------------------------
# regularization

def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale the rest by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate {p} outside [0, 1)")
    if not training or p == 0.0:
        def bw(g):
            _accum(x, g)
        return _node("dropout", x.data, (x,), bw)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def bw(g):
        _accum(x, g * mask)
    return _node("dropout", x.data * mask, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (B, C, H, W) -> (B, OH, OW, C*kh*kw) patch matrix
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, c, oh, ow = view.shape[:4]
    return np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b, oh, ow, c * kh * kw)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid 2-D convolution (really cross-correlation, the NN convention).

    x: (B, C_in, H, W); kernels: (C_out, C_in, KH, KW); bias: (C_out,)
    -> (B, C_out, H-KH+1, W-KW+1)
    """
    if x.data.ndim != 4 or kernels.data.ndim != 4 or \
            x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and "
                         f"{kernels.shape}")
    bsz, c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kernels.shape} larger than input "
                         f"{x.shape}")
    cols = _im2col(x.data, kh, kw)  # (B, OH, OW, C*kh*kw)
    oh, ow = cols.shape[1], cols.shape[2]
    kmat = kernels.data.reshape(c_out, -1)
    out = cols @ kmat.T + bias.data  # (B, OH, OW, C_out)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gl = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (B, OH, OW, C_out)
        _accum(bias, gl.reshape(-1, c_out).sum(axis=0))
        gr = gl.reshape(-1, c_out)
        _accum(kernels,
               (gr.T @ cols.reshape(-1, c_in * kh * kw)).reshape(kernels.shape))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            # accumulate one shifted matmul per kernel offset
            for dh in range(kh):
                for dw in range(kw):
                    contrib = gr @ kernels.data[:, :, dh, dw]  # (B*OH*OW, C_in)
                    contrib = contrib.reshape(bsz, oh, ow, c_in).transpose(0, 3, 1, 2)
                    dx[:, :, dh:dh + oh, dw:dw + ow] += contrib
            _accum(x, dx)
    return _node("conv2d", out, (x, kernels, bias), bw)


def maxpool_freq(x: Tensor, width: int = 3, stride: int = 3) -> Tensor:
    """Max-pool along the last (frequency) axis only; remainder dropped."""
    w = x.shape[-1]
    if w < width:
        raise ShapeError(f"maxpool_freq: axis length {w} shorter than window "
                         f"{width}")
    ow = (w - width) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=-1)
    windows = windows[..., ::stride, :][..., :ow, :]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    src = np.arange(ow) * stride + arg  # position of each max in the input axis

    def bw(g):
        g2 = g.reshape(-1, ow)
        idx2 = src.reshape(-1, ow)
        dx2 = np.zeros((g2.shape[0], w), dtype=x.dtype)
        np.add.at(dx2, (np.arange(g2.shape[0])[:, None], idx2), g2)
        _accum(x, dx2.reshape(x.shape))
    return _node("maxpool_freq", np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# LSTM step (composite of primitives; tape handles the backward)

def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params) -> tuple[Tensor, Tensor]:
    """One LSTM step: gates i,f,o = sigmoid, candidate g = tanh, no peepholes.

    c_t = f * c_prev + i * g ; h_t = o * tanh(c_t).
    `params` carries fused weights (input, forget, output, candidate blocks).
    """
    hidden = params.hidden
    z = add(add(matmul(x, params.wx), matmul(h_prev, params.wh)), params.b)
    i = sigmoid(slice_axis(z, 1, 0, hidden))
    f = sigmoid(slice_axis(z, 1, hidden, 2 * hidden))
    o = sigmoid(slice_axis(z, 1, 2 * hidden, 3 * hidden))
    g = tanh(slice_axis(z, 1, 3 * hidden, 4 * hidden))
    c_t = add(mul(f, c_prev), mul(i, g))
    h_t = mul(o, tanh(c_t))
    return h_t, c_t


# ---------------------------------------------------------------------------
# losses

_P_EPS = 1e-7


def bce_mean(p: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of probabilities vs 0/1 targets.

    Probabilities are clamped to [1e-7, 1-1e-7]; the gradient is zero where
    the clamp is active.
    """
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"bce_mean: predictions {p.shape} vs targets {y.shape}")
    pc = np.clip(p.data.astype(np.float64), _P_EPS, 1.0 - _P_EPS)
    val = np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
    inside = (p.data > _P_EPS) & (p.data < 1.0 - _P_EPS)

    def bw(g):
        gs = g.item() if not np.isscalar(g) else g
        grad = (pc - y) / (pc * (1.0 - pc) * y.size)
        _accum(p, (gs * grad * inside).astype(p.dtype))
    return _node("bce_mean", np.asarray(val, dtype=p.dtype), (p,), bw)


def bce_with_logits_mean(z: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable mean BCE on logits."""
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"bce_with_logits_mean: logits {z.shape} vs targets "
                         f"{y.shape}")
    zd = z.data.astype(np.float64)
    val = np.mean(np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd))))
    sig = 1.0 / (1.0 + np.exp(-np.abs(zd)))
    sig = np.where(zd >= 0, sig, 1.0 - sig)  # sigmoid(zd), stable

    def bw(g):
        gs = g.item() if not np.isscalar(g) else g
        _accum(z, (gs * (sig - y) / y.size).astype(z.dtype))
    return _node("bce_with_logits_mean", np.asarray(val, dtype=z.dtype), (z,), bw)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          reduce: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) vs integer labels, natural log."""
    lab = np.asarray(labels)
    if logits.data.ndim != 2 or lab.ndim != 1 or logits.shape[0] != lab.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs "
                         f"labels {lab.shape}")
    zd = logits.data.astype(np.float64)
    zd = zd - zd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zd).sum(axis=1))
    per = lse - zd[np.arange(len(lab)), lab]
    probs = np.exp(zd - lse[:, None])
    onehot = np.zeros_like(zd)
    onehot[np.arange(len(lab)), lab] = 1.0

    if reduce == "mean":
        def bw(g):
            gs = g.item() if not np.isscalar(g) else g
            _accum(logits, (gs * (probs - onehot) / len(lab)).astype(logits.dtype))
        return _node("softmax_cross_entropy",
                     np.asarray(per.mean(), dtype=logits.dtype), (logits,), bw)
    if reduce == "none":
        def bw(g):
            _accum(logits, ((probs - onehot) * g[:, None]).astype(logits.dtype))
        return _node("softmax_cross_entropy",
                     per.astype(logits.dtype), (logits,), bw)
    raise ValueError(f"unknown reduce mode {reduce!r}")
