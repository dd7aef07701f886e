"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays; operations record a tape node with a closure
that maps the output gradient to input gradients.  backward() walks the
tape in reverse topological order exactly once.  Gradients accumulate
across repeated backward calls until zero_grad().
"""

import numpy as np
from scipy.special import erf

from .errors import ContractError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        if isinstance(data, Tensor):
            data = data.data
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents if requires_grad else ()
        self._backward_fn = backward_fn if requires_grad else None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, op="detach")

    def backward(self):
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar root, got shape {self.shape}"
            )
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum grad over axes that were broadcast from `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(parents), backward_fn=backward_fn, op=op)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), backward, "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if b.ndim == 1:
            ga = np.outer(g, b.data) if a.ndim > 1 else g * b.data
            gb = a.data.T @ g if a.ndim > 1 else g * a.data
            return _unbroadcast(np.asarray(ga), a.data.shape), _unbroadcast(
                np.asarray(gb), b.data.shape
            )
        if a.ndim == 1:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.outer(a.data, g)
            return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(out, (a, b), backward, "matmul")


def transpose(a, axis1=-2, axis2=-1):
    a = as_tensor(a)
    out = np.swapaxes(a.data, axis1, axis2)

    def backward(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _node(out, (a,), backward, "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), backward, "reshape")


def slice_(a, key):
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(out, (a,), backward, "slice")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _node(out, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _node(out, (a,), backward, "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), backward, "tanh")


def softplus(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _node(out, (a,), backward, "softplus")


def gelu(a):
    """Exact (erf-based) Gaussian error linear unit."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _node(out, (a,), backward, "gelu")


def softmax(a, axis=-1, temperature=1.0):
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    a = as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _node(out, (a,), backward, "softmax")


def log_softmax(a, axis=-1, temperature=1.0):
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    a = as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _node(out, (a,), backward, "log_softmax")


def layer_norm(a, axis=-1, eps=1e-5, gain=None, bias=None):
    """Normalize to zero mean / unit variance along `axis`, then optionally
    scale and shift with learnable gain/bias."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = a.data.shape[axis]

    def backward(g):
        gsum = g.sum(axis=axis, keepdims=True)
        gx = (g - gsum / n - xhat * (g * xhat).sum(axis=axis, keepdims=True) / n) * inv
        return (gx,)

    out = _node(xhat, (a,), backward, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def masked_fill(a, mask, value):
    """Replace entries where `mask` is True with a constant value."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.data)

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return _node(out, (a,), backward, "masked_fill")


def mse(pred, target, mask=None):
    """Mean squared error over all (or all unmasked) elements."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.data.shape != target.shape:
        raise ContractError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        count = int(mask.sum())
        if count == 0:
            return Tensor(0.0)
        out = ((diff * mask) ** 2).sum() / count

        def backward(g):
            return (g * 2.0 * diff * mask / count,)

    else:
        count = diff.size
        out = (diff**2).sum() / count

        def backward(g):
            return (g * 2.0 * diff / count,)

    return _node(np.asarray(out), (pred,), backward, "mse")


def cross_entropy(target_probs, log_probs, axis=-1, reduction="mean"):
    """Soft-label cross entropy: -sum(target * log_probs) along `axis`,
    then reduced over the remaining axes."""
    target = np.asarray(
        target_probs.data if isinstance(target_probs, Tensor) else target_probs
    )
    log_probs = as_tensor(log_probs)
    if target.shape != log_probs.data.shape:
        raise ContractError(
            f"cross_entropy shape mismatch: {target.shape} vs {log_probs.shape}"
        )
    per_row = -(target * log_probs.data).sum(axis=axis)
    if reduction == "mean":
        out, scale = per_row.mean(), 1.0 / max(1, per_row.size)
    elif reduction == "sum":
        out, scale = per_row.sum(), 1.0
    else:
        raise ContractError(f"unknown reduction {reduction!r}")

    def backward(g):
        return (-g * scale * target,)

    return _node(np.asarray(out), (log_probs,), backward, "cross_entropy")


def grad_check(fn, tensors, h=1e-5, max_coords=None, seed=0):
    """Max relative error of analytic vs central-difference gradients.

    `fn` maps the tensors to a scalar Tensor.  Relative error uses the
    denominator max(|analytic|, |numeric|, 1e-8) per element.  With
    `max_coords`, at most that many coordinates per tensor are probed
    (seeded random subset) — needed for large parameter sets where the
    full sweep would be too slow.
    """
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*tensors)
    out.backward()
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            hi = float(fn(*tensors).data)
            flat[i] = orig - h
            lo = float(fn(*tensors).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
