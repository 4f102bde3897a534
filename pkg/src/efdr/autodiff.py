"""A small tape-based reverse-mode autodiff engine on top of numpy.

Only the operations the hiding network needs are provided. Every op
records its parents and a closure computing the vector-Jacobian product;
:meth:`Tensor.backward` walks the recorded graph once in reverse
topological order and then releases it.

Gradients of leaf tensors accumulate across graphs until
:meth:`Tensor.zero_grad` (or :meth:`Adam.zero_grad`) clears them.
Calling ``backward`` a second time on a released graph raises
:class:`GraphReleasedError`.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

_grad_enabled = True


class GraphReleasedError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_released",
                 "version", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._released = False
        self.version = 0
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {self.name or 'tensor'}")
        return self

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self._released:
            raise GraphReleasedError("backward called twice on the same graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._parents:
                node._parents = ()
                node._vjp = None
                node._released = True

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root):
    order = []
    seen = set()
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ------------------------------------------------------------ elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(x, c):
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def gelu(x):
    """Exact (erf based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1 + erf(x.data / np.sqrt(2)))
    pdf = np.exp(-0.5 * x.data ** 2) / np.sqrt(2 * np.pi)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def soft_clamp(x, alpha):
    """alpha * tanh(x / alpha): smooth bound |y| < alpha."""
    return scale(tanh(scale(x, 1.0 / alpha)), alpha)


# ------------------------------------------------------------ reductions

def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(y, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis, keepdims), 1.0 / n)


def mse(a, b):
    d = sub(a, b)
    return mean(mul(d, d))


# ------------------------------------------------------------ shape ops

def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def slice_axis(x, start, stop, axis):
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)
    return _make(x.data[idx], (x,), vjp)


# ------------------------------------------------------------ linear algebra

def matmul(a, b):
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, (a, b), vjp)


def inverse(w):
    w = as_tensor(w)
    inv = np.linalg.inv(w.data)
    return _make(inv, (w,), lambda g: (-inv.T @ g @ inv.T,))


def conv1x1(x, w):
    """Per-position channel mixing: (..., C, H, W) with (C_out, C)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 3 or w.ndim != 2 or w.shape[1] != x.shape[-3]:
        raise ValueError(f"conv1x1 shape mismatch: {x.shape} with {w.shape}")
    *lead, c, h, wd = x.shape
    flat = x.data.reshape(*lead, c, h * wd)
    y = (w.data @ flat).reshape(*lead, w.shape[0], h, wd)

    def vjp(g):
        gf = g.reshape(*lead, w.shape[0], h * wd)
        gx = (w.data.T @ gf).reshape(x.shape)
        gw = gf @ np.swapaxes(flat, -1, -2)
        if gw.ndim > 2:
            gw = gw.reshape(-1, *w.shape).sum(axis=0)
        return gx, gw
    return _make(y, (x, w), vjp)


def linear_map(x, forward, adjoint):
    """Apply a fixed linear map given as a function and its adjoint."""
    x = as_tensor(x)
    return _make(forward(x.data), (x,), lambda g: (adjoint(g),))


# ------------------------------------------------------------ normalization

def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def vjp(g):
        gh = g * gain.data
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)
    return _make(xhat * gain.data + bias.data, (x, gain, bias), vjp)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# ------------------------------------------------------------ optimization

def adam_step(params, grads, state, lr, betas=(0.5, 0.999), eps=1e-6, weight_decay=5e-4):
    """One Adam update with L2 weight decay folded into the gradient.

    ``params`` and ``grads`` are sequences of arrays; params are updated
    in place. ``state`` is a dict holding ``step``, ``m`` and ``v`` and is
    initialised on first use.
    """
    if not state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    b1, b2 = betas
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, params, lr=5e-4, betas=(0.5, 0.999), eps=1e-6, weight_decay=5e-4):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, self.lr, self.betas, self.eps, self.weight_decay)
        for p in self.params:
            p.version += 1


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    a relative improvement of ``threshold`` in the monitored (minimised) value."""

    def __init__(self, optimizer, factor=0.5, patience=10, threshold=1e-4, min_lr=0.0):
        if not 0 < factor < 1:
            raise ValueError("factor must be in (0, 1)")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.num_bad = 0

    def step(self, value):
        if value < self.best * (1 - self.threshold):
            self.best = value
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad > self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.num_bad = 0
