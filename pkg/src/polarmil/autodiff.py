"""Minimal reverse-mode differentiation engine on float64 numpy arrays.

Each op records a closure that scatters the output gradient back to its
parents; ``Tensor.backward`` runs the closures in reverse topological order.
The op set is exactly what the segmentation losses and the small
encoder-decoder network need: elementwise arithmetic, exp/log/pow, logistic
and relu, reductions, shape ops, 2-D matmul, 3x3/1x1 convolutions via
im2col, 2x2 average pooling, nearest upsampling, and linear gather ops for
polar resampling.  Convolutions cache their im2col matrix so the backward
pass reuses the BLAS-friendly layout; gradients are accumulated into lazily
allocated buffers to keep evaluation passes allocation-free.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = [True]


class no_grad:
    """Context manager that suppresses tape recording (evaluation passes)."""

    def __enter__(self):
        _grad_enabled.append(False)

    def __exit__(self, *exc):
        _grad_enabled.pop()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-d value/gradient pair participating in reverse-mode differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # allocated lazily on first accumulation
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad[...] = 0.0

    def accum_grad(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def backward(self):
        """Populate gradients of every upstream tensor that requires them."""
        if not self.requires_grad:
            raise RuntimeError("backward called on a tensor outside any recorded computation")
        if self.size != 1:
            raise RuntimeError(f"backward requires a scalar, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:  # iterative DFS; graphs exceed the recursion limit
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.accum_grad(np.ones_like(self.values))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward):
    """Build an op output; constants short-circuit the tape."""
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(values)


# -- elementwise arithmetic (numpy broadcasting rules) ----------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_values = a.values + b.values

    def backward(grad):
        if a.requires_grad:
            a.accum_grad(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(grad, b.shape))

    return _make(out_values, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_values = a.values * b.values

    def backward(grad):
        if a.requires_grad:
            a.accum_grad(_unbroadcast(grad * b.values, a.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(grad * a.values, b.shape))

    return _make(out_values, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_values = a.values / b.values

    def backward(grad):
        if a.requires_grad:
            a.accum_grad(_unbroadcast(grad / b.values, a.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(-grad * out_values / b.values, b.shape))

    return _make(out_values, (a, b), backward)


def pow_const(a, exponent: float) -> Tensor:
    a = astensor(a)
    e = float(exponent)
    out_values = a.values**e

    def backward(grad):
        a.accum_grad(grad * e * a.values ** (e - 1.0))

    return _make(out_values, (a,), backward)


def exp(a) -> Tensor:
    a = astensor(a)
    out_values = np.exp(a.values)

    def backward(grad):
        a.accum_grad(grad * out_values)

    return _make(out_values, (a,), backward)


def log(a) -> Tensor:
    a = astensor(a)
    out_values = np.log(a.values)

    def backward(grad):
        a.accum_grad(grad / a.values)

    return _make(out_values, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through only strictly inside (lo, hi)."""
    a = astensor(a)
    out_values = np.clip(a.values, lo, hi)
    inside = (a.values > lo) & (a.values < hi)

    def backward(grad):
        a.accum_grad(grad * inside)

    return _make(out_values, (a,), backward)


def relu(a) -> Tensor:
    a = astensor(a)
    out_values = np.maximum(a.values, 0.0)

    def backward(grad):
        a.accum_grad(grad * (a.values > 0.0))

    return _make(out_values, (a,), backward)


def sigmoid(a) -> Tensor:
    a = astensor(a)
    out_values = 1.0 / (1.0 + np.exp(-a.values))

    def backward(grad):
        a.accum_grad(grad * out_values * (1.0 - out_values))

    return _make(out_values, (a,), backward)


# -- reductions and shape ops ------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accum_grad(np.broadcast_to(g, a.shape))

    return _make(out_values, (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = astensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    out_values = a.values.reshape(shape)

    def backward(grad):
        a.accum_grad(grad.reshape(a.shape))

    return _make(out_values, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = astensor(a)
    out_values = a.values.transpose(axes)
    inverse = np.argsort(axes)

    def backward(grad):
        a.accum_grad(grad.transpose(inverse))

    return _make(out_values, (a,), backward)


def getitem(a, key) -> Tensor:
    a = astensor(a)
    out_values = a.values[key]

    def backward(grad):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        np.add.at(a.grad, key, grad)

    return _make(out_values, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out_values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * grad.ndim
                sl[axis] = slice(start, stop)
                t.accum_grad(grad[tuple(sl)])

    return _make(out_values, tuple(tensors), backward)


# -- linear algebra and gathers ----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_values = a.values @ b.values

    def backward(grad):
        if a.requires_grad:
            a.accum_grad(grad @ b.values.T)
        if b.requires_grad:
            b.accum_grad(a.values.T @ grad)

    return _make(out_values, (a, b), backward)


def take_flat(a, indices: np.ndarray) -> Tensor:
    """Select elements of the flattened tensor; the MIL negative-bag gather."""
    a = astensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_values = a.values.ravel()[idx]

    def backward(grad):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        np.add.at(a.grad.reshape(-1), idx, grad)

    return _make(out_values, (a,), backward)


def gather_linear(a, indices: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted gather out[k] = sum_j w[k, j] * flat(a)[idx[k, j]].

    This is the interpolation stencil applied as a single linear op, so the
    gradient is the transposed scatter with the same weights.
    """
    a = astensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    wgt = np.asarray(weights, dtype=np.float64)
    out_values = (a.values.ravel()[idx] * wgt).sum(axis=1)

    def backward(grad):
        if a.grad is None:
            a.grad = np.zeros_like(a.values)
        np.add.at(a.grad.reshape(-1), idx, wgt * grad[:, None])

    return _make(out_values, (a,), backward)


# -- convolution stack ---------------------------------------------------------

def _im2col(padded: np.ndarray, height: int, width: int) -> np.ndarray:
    """(B, C, H+2, W+2) -> contiguous (B, C*9, H*W) patch matrix."""
    b, c = padded.shape[0], padded.shape[1]
    s = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded, (b, c, 3, 3, height, width), (s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return np.ascontiguousarray(view).reshape(b, c * 9, height * width)


def conv3x3(x, weight, bias) -> Tensor:
    """Same-padded 3x3 convolution: (B,C,H,W) -> (B,O,H,W)."""
    x, weight, bias = astensor(x), astensor(weight), astensor(bias)
    b, c, h, w = x.shape
    o = weight.shape[0]
    padded = np.zeros((b, c, h + 2, w + 2))
    padded[:, :, 1:-1, 1:-1] = x.values
    cols = _im2col(padded, h, w)
    wmat = weight.values.reshape(o, c * 9)
    out_values = np.matmul(wmat, cols).reshape(b, o, h, w) + bias.values.reshape(1, o, 1, 1)

    def backward(grad):
        g = grad.reshape(b, o, h * w)
        if bias.requires_grad:
            bias.accum_grad(grad.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.zeros((o, c * 9))
            for i in range(b):  # batched dgemm without transposing the 3-d buffer
                gw += g[i] @ cols[i].T
            weight.accum_grad(gw.reshape(o, c, 3, 3))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g).reshape(b, c, 3, 3, h, w)
            gpad = np.zeros((b, c, h + 2, w + 2))
            for ky in range(3):
                for kx in range(3):
                    gpad[:, :, ky : ky + h, kx : kx + w] += gcols[:, :, ky, kx]
            x.accum_grad(gpad[:, :, 1:-1, 1:-1])

    return _make(out_values, (x, weight, bias), backward)


def conv1x1(x, weight, bias=None) -> Tensor:
    """Pointwise convolution: a channel-mixing matmul."""
    x, weight = astensor(x), astensor(weight)
    parents = [x, weight]
    b, c, h, w = x.shape
    o = weight.shape[0]
    xmat = x.values.reshape(b, c, h * w)
    out_values = np.matmul(weight.values, xmat).reshape(b, o, h, w)
    if bias is not None:
        bias = astensor(bias)
        parents.append(bias)
        out_values = out_values + bias.values.reshape(1, o, 1, 1)

    def backward(grad):
        g = grad.reshape(b, o, h * w)
        if bias is not None and bias.requires_grad:
            bias.accum_grad(grad.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.zeros((o, c))
            for i in range(b):
                gw += g[i] @ xmat[i].T
            weight.accum_grad(gw)
        if x.requires_grad:
            x.accum_grad(np.matmul(weight.values.T, g).reshape(b, c, h, w))

    return _make(out_values, tuple(parents), backward)


def avgpool2(x) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    x = astensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    out_values = x.values.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(grad):
        x.accum_grad(np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) * 0.25)

    return _make(out_values, (x,), backward)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x = astensor(x)
    out_values = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def backward(grad):
        b, c, h2, w2 = grad.shape
        x.accum_grad(grad.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out_values, (x,), backward)
