"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op below builds a node holding its inputs and a closure that maps the
output gradient onto input gradients. ``Tensor.backward`` orders the graph
topologically and walks it once in reverse.

Broadcasting is deliberately narrow: tensor-vs-scalar only. The few places a
network needs row or channel broadcasting (bias add, batch norm) have their
own primitives.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ---------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``.grad`` on every reachable tensor with ``requires_grad``.

        Gradients accumulate across calls; the caller resets them.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return

        order, seen = [], set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            # interior nodes keep no grad; leaves accumulate
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward, op)


def _is_scalar(x):
    return not isinstance(x, Tensor) and np.ndim(x) == 0


# -- elementwise ------------------------------------------------------------


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    if _is_scalar(b):
        a = _lift(a)
        return _node(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        b = _lift(b)
        return _node(a - b.data, (b,), lambda g: (-g,), "rsub_scalar")
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    if _is_scalar(b):
        a, s = _lift(a), float(b)
        return _node(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    if _is_scalar(a):
        return mul(b, a)
    a, b = _lift(a), _lift(b)
    _check_same(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def exp(x):
    x = _lift(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = _lift(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log of a nonpositive value; clamp probabilities first")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x):
    x = _lift(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def clamp(x, lo=None, hi=None):
    """Clip into ``[lo, hi]``; gradient passes only where no clipping happened."""
    x = _lift(x)
    out = np.clip(x.data, lo, hi)
    mask = out == x.data
    return _node(out, (x,), lambda g: (g * mask,), "clamp")


def log_prob(p):
    """``log`` of probabilities clamped into ``[1e-12, 1]``."""
    return log(clamp(p, PROB_FLOOR, 1.0))


def gather(x, index):
    """Pick ``x[i, index[i]]`` for every row of a 2-D tensor."""
    x = _lift(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ValueError(f"gather: need (n, K) and (n,), got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _node(x.data[rows, index], (x,), backward, "gather")


def take_rows(x, rows):
    """Row selection ``x[rows]``; ``rows`` holds distinct integer positions."""
    x = _lift(x)
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, rows, g)
        return (gx,)

    return _node(x.data[rows], (x,), backward, "take_rows")


def reshape(x, shape):
    x = _lift(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# -- reductions ---------------------------------------------------------------


def tsum(x, axis=None):
    x = _lift(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward, "sum")


def tmean(x, axis=None):
    x = _lift(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / count)


def softmax(x, axis=-1):
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    x = _lift(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_bias(x, bias):
    """``x + bias`` with ``bias`` of shape (d,) broadcast over the rows of (n, d)."""
    x, bias = _lift(x), _lift(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ValueError(f"add_bias: {x.shape} + {bias.shape}")
    return _node(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def _windows(xp, stride, oh, ow):
    # (n, c, oh, ow, 3, 3) view of padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]


def conv2d(x, k, stride=1, pad=0):
    """3x3 cross-correlation of (n, c, h, w) input with (o, c, 3, 3) kernels."""
    x, k = _lift(x), _lift(k)
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    if x.ndim != 4 or k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: expected (n,c,h,w) and (o,c,3,3), got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    n, c, h, w = x.shape
    if h + 2 * pad < 3 or w + 2 * pad < 3:
        raise ValueError("conv2d: padded input smaller than the kernel")
    oh = (h + 2 * pad - 3) // stride + 1
    ow = (w + 2 * pad - 3) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, stride, oh, ow)
    # patches as (n*oh*ow, c*9) for a single GEMM
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * 9)
    kmat = k.data.reshape(k.shape[0], c * 9)
    out = (cols @ kmat.T).reshape(n, oh, ow, -1).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, -1)
        gk = (gmat.T @ cols).reshape(k.shape)
        gcols = (gmat @ kmat).reshape(n, oh, ow, c, 3, 3)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return (gx, gk)

    return _node(np.ascontiguousarray(out), (x, k), backward, "conv2d")


def global_avg_pool(x):
    """(n, c, h, w) -> (n, c) spatial mean."""
    x = _lift(x)
    n, c, h, w = x.shape
    return _node(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
        "gap",
    )


def avg_pool2(x):
    """2x2 average pooling with stride 2; odd trailing rows/columns are dropped."""
    x = _lift(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    core = x.data[:, :, : 2 * h2, : 2 * w2]
    out = core.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        return (gx,)

    return _node(out, (x,), backward, "avg_pool2")


def _channel_axes(x):
    # reduce over every axis except the channel axis 1
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bcast(v, ndim):
    return v if ndim == 2 else v[None, :, None, None]


def batch_norm_train(x, gamma, beta, xi):
    """Normalize with batch statistics over all non-channel axes.

    Returns the output tensor together with the batch mean and
    ``sqrt(var + xi)`` (biased variance), both as plain arrays.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    axes = _channel_axes(x)
    m = x.data.size // x.shape[1]
    mu = x.data.mean(axis=axes)
    var = ((x.data - _bcast(mu, x.ndim)) ** 2).mean(axis=axes)
    sigma = np.sqrt(var + xi)
    xhat = (x.data - _bcast(mu, x.ndim)) / _bcast(sigma, x.ndim)
    out = _bcast(gamma.data, x.ndim) * xhat + _bcast(beta.data, x.ndim)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gm = _bcast(dbeta / m, x.ndim)
        gxm = _bcast(dgamma / m, x.ndim)
        dx = _bcast(gamma.data / sigma, x.ndim) * (g - gm - xhat * gxm)
        return (dx, dgamma, dbeta)

    return _node(out, (x, gamma, beta), backward, "batch_norm"), mu, sigma


def batch_norm_eval(x, gamma, beta, mean, sigma):
    """Affine normalization with fixed (running) statistics."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    axes = _channel_axes(x)
    xhat = (x.data - _bcast(mean, x.ndim)) / _bcast(sigma, x.ndim)
    out = _bcast(gamma.data, x.ndim) * xhat + _bcast(beta.data, x.ndim)

    def backward(g):
        return (
            g * _bcast(gamma.data / sigma, x.ndim),
            (g * xhat).sum(axis=axes),
            g.sum(axis=axes),
        )

    return _node(out, (x, gamma, beta), backward, "batch_norm_eval")


# -- gradient oracle -----------------------------------------------------------


def numerical_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(np.asarray(f(Tensor(x.copy())).data))
        flat[i] = old - h
        fm = float(np.asarray(f(Tensor(x.copy())).data))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def finite_difference_check(f, x, h=1e-5):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The denominator of each entry is
    ``max(|g|, 1e-8)`` with ``g`` the autodiff gradient.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    f(leaf).backward()
    auto = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    num = numerical_gradient(f, x, h)
    denom = np.maximum(np.abs(auto), 1e-8)
    if auto.size == 0:
        return 0.0
    return float(np.max(np.abs(auto - num) / denom))
