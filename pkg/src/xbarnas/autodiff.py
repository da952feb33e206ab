"""Small reverse-mode autodiff over float64 numpy arrays.

Every op builds its output through ``_result``; when gradients are enabled and
any input requires them, the output keeps references to its parents and a
closure mapping the output gradient to per-parent gradients.  ``backward``
topologically orders the recorded graph and runs those closures once each,
in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def frozen(tensors: Iterable["Tensor"]):
    """Temporarily mark ``tensors`` as constants (no grad accumulation)."""
    tensors = list(tensors)
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, f in zip(tensors, flags):
            t.requires_grad = f


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def __len__(self) -> int:
        return self.data.shape[0]

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing it."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"non-finite loss {loss.data!r}")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _result(a.data + b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    ad = a.data

    def fn(g):
        return (g * e * ad ** (e - 1.0),)

    return _result(ad ** e, (a,), fn)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, g.item()),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, g.item() / n),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def take(a: Tensor, index) -> Tensor:
    orig = a.shape

    def fn(g):
        out = np.zeros(orig)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.data[index]), (a,), fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def stack_scalars(items: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into a 1-D tensor."""
    data = np.array([t.data.item() for t in items])

    def fn(g):
        return tuple(np.array(g[i]) for i in range(len(items)))

    return _result(data, tuple(items), fn)


# ---------------------------------------------------------------------------
# dense layers and losses
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with x [N, F], weight [O, F]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return _result(out, parents, fn)


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    s = _softmax_np(a.data, axis)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; labels are class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    if not np.isfinite(loss):
        raise FloatingPointError("cross_entropy overflowed")

    def fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g.item() / n),)

    return _result(np.array(loss), (logits,), fn)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # [N, C, Ho, Wo, k, k]
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _fold(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_windows``: scatter-add [N, C, Ho, Wo, k, k] into [N, C, H, W]."""
    n, c, h, w = shape
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N, C, H, W] with weight [O, C, k, k] (no bias)."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, c2, k, k2 = weight.shape
    if c != c2 or k != k2:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {h}x{w}")

    cols = _im2col(x.data, k, stride, padding)
    # columns are ordered (ki, kj, c); permute the kernel to match
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            if stride == 1 and 2 * padding == k - 1:
                # same-size conv: input grad is a correlation with the flipped, transposed kernel
                wt = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * o)
                gx = (_im2col(g, k, 1, padding) @ wt.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
                gx = np.ascontiguousarray(gx)
            else:
                gcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c).transpose(0, 5, 1, 2, 3, 4)
                gx = _fold(gcols, x.shape, k, stride, padding)
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, weight), fn)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """[N*Ho*Wo, k*k*C] patch matrix, channels innermost."""
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x.transpose(0, 2, 3, 1), (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def avgpool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: Optional[int] = None,
              count_include_pad: bool = False) -> Tensor:
    """Average pooling; default padding is ``kernel // 2``.

    With ``count_include_pad=False`` each window is divided by the number of
    real (unpadded) cells, so constant inputs map to the same constant.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding is None:
        padding = kernel // 2
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    sums = _windows(x.data, kernel, stride, padding).sum(axis=(4, 5))
    if count_include_pad:
        counts = np.full((ho, wo), float(kernel * kernel))
    else:
        ones = np.ones((1, 1, h, w))
        counts = _windows(ones, kernel, stride, padding).sum(axis=(4, 5))[0, 0]
    out = sums / counts

    def fn(g):
        gs = g / counts
        if stride == 1 and 2 * padding == kernel - 1:
            # box kernel is symmetric, so the adjoint is another same-size box sum
            return (_windows(gs, kernel, 1, padding).sum(axis=(4, 5)),)
        cols = np.broadcast_to(gs[:, :, :, :, None, None], (n, c, ho, wo, kernel, kernel))
        return (_fold(cols, x.shape, kernel, stride, padding),)

    return _result(out, (x,), fn)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batchnorm layer (not differentiated)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool) -> Tensor:
    """Per-channel batchnorm over axes (N, H, W) of a 4-D input."""
    if x.ndim != 4:
        raise ValueError(f"batchnorm expects [N, C, H, W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta must have shape ({c},)")
    bshape = (1, c, 1, 1)
    gd = gamma.data.reshape(bshape)
    xd = x.data

    if training:
        axes = (0, 2, 3)
        m = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * m / (m - 1) if m > 1 else var
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mu
        state.running_var = (1 - mom) * state.running_var + mom * unbiased
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)

        def fn(g):
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=axes)
            if beta.requires_grad:
                gb = g.sum(axis=axes)
            if x.requires_grad:
                dxhat = g * gd
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv_std.reshape(bshape) * (dxhat - s1 / m - xhat * s2 / m)
            return gx, gg, gb
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)

        def fn(g):
            return (g * gd * inv_std.reshape(bshape) if x.requires_grad else None,
                    (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None,
                    g.sum(axis=(0, 2, 3)) if beta.requires_grad else None)

    out = xhat * gd + beta.data.reshape(bshape)
    return _result(out, (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction; ``t`` counts from 1."""
    if param.shape != grad.shape or m.shape != param.shape or v.shape != param.shape:
        raise ValueError("adam_step: parameter, gradient and state shapes differ")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a fixed list of tensors; missing gradients count as zero."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, g, m, v, self.t, self.lr, b1, b2, self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.t = t
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m{i}"]
            self.v[i][...] = arrays[f"v{i}"]
