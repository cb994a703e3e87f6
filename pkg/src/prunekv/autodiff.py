"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery to backpropagate a distillation loss through a small
transformer: broadcasting elementwise ops, batched matmul, fused attention /
normalization primitives, an Adam optimizer, and a finite-difference oracle.
All arithmetic is 64-bit.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


def _check_broadcast(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}") from None


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from a scalar loss.

        Populates ``.grad`` on every tensor in the graph and returns a map
        from ``id(leaf)`` to the gradient array of each requires-grad leaf.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        return {id(t): t.grad for t in topo if t.requires_grad and not t._parents}

    # operator sugar; implementations below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bwd)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])

    def bwd(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bwd)


def transpose(a, axes):
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _node(np.transpose(a.data, axes), (a,), bwd)


def reshape(a, shape):
    a = _lift(a)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def getitem(a, idx):
    a = _lift(a)

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return _node(a.data[idx], (a,), bwd)


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def texp(a):
    a = _lift(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), bwd)


def tlog(a):
    a = _lift(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def l1_norm(a):
    """Sum of absolute values; subgradient at 0 is 0."""
    a = _lift(a)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _node(np.abs(a.data).sum(), (a,), bwd)


def sum_squares(a):
    """Squared L2 (Frobenius) norm of all entries."""
    a = _lift(a)

    def bwd(g):
        _accum(a, 2.0 * g * a.data)

    return _node((a.data * a.data).sum(), (a,), bwd)


def softmax(a, additive_mask=None, axis=-1):
    """Softmax along `axis`; `additive_mask` is added to the logits first.

    Masked-out positions should carry a large negative value in the mask
    (selection semantics), never a multiplicative zero.
    """
    a = _lift(a)
    z = a.data if additive_mask is None else a.data + additive_mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        _accum(a, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _node(p, (a,), bwd)


def rms_norm(x, weight, eps=1e-6):
    """RMS-normalize over the last axis, then scale elementwise by `weight`."""
    x, weight = _lift(x), _lift(weight)
    n = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    out_data = x.data * inv * weight.data

    def bwd(g):
        gw_x = g * weight.data
        _accum(x, gw_x * inv - x.data * (inv ** 3 / n) * (gw_x * x.data).sum(axis=-1, keepdims=True))
        _accum(weight, _unbroadcast(g * x.data * inv, weight.shape))

    return _node(out_data, (x, weight), bwd)


def silu(x):
    x = _lift(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        _accum(x, g * s * (1.0 + x.data * (1.0 - s)))

    return _node(x.data * s, (x,), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """Tanh-approximation GeLU."""
    x = _lift(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _node(0.5 * x.data * (1.0 + t), (x,), bwd)


def rope_rotate(x, cos, sin):
    """Rotate-half RoPE: channel i pairs with channel i + d/2.

    `x` has shape (..., T, d) with even d; `cos`/`sin` have shape (T, d/2).
    """
    x = _lift(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rope needs an even head dimension, got {d}")
    h = d // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out_data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bwd(g):
        g1, g2 = g[..., :h], g[..., h:]
        _accum(x, np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1))

    return _node(out_data, (x,), bwd)


def embedding(weight, ids):
    """Row gather from an embedding table with scatter-add backward."""
    weight = _lift(weight)
    ids = np.asarray(ids)

    def bwd(g):
        buf = np.zeros_like(weight.data)
        np.add.at(buf, ids, g)
        _accum(weight, buf)

    return _node(weight.data[ids], (weight,), bwd)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of `targets` under softmax(logits).

    `logits` has shape (N, V), `targets` is an int array of shape (N,).
    """
    logits = _lift(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy got logits {logits.shape}, targets {targets.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), targets]

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        _accum(logits, (float(g) / n) * p)

    return _node(nll.mean(), (logits,), bwd)


def finite_difference_gradient(f, x, eps=1e-5):
    """Central-difference gradient of scalar function `f` at ndarray `x`."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction. Purely functional.

    `params` and `grads` are lists of ndarrays; `state` is None on the first
    call or the dict returned by the previous one.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params],
                 "v": [np.zeros_like(p) for p in params]}
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ShapeError("params/grads/state length mismatch")
    t = state["t"] + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """In-place Adam over a list of Tensors, built on `adam_step`."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state,
                                    self.lr, self.beta1, self.beta2, self.eps)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self):
        for p in self.params:
            p.grad = None
