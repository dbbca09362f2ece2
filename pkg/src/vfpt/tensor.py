"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation eagerly computes its value with numpy and, when gradient
tracking is active, records a backward closure on the output. `backward()`
runs one topologically ordered sweep and then tears the graph down, so a
graph lives exactly as long as one forward/backward cycle.

Tensors that do not require gradients never receive a `.grad` buffer, and
subgraphs built purely from such tensors record no closures at all.
"""

from __future__ import annotations

import contextlib
import weakref

import numpy as np

from .errors import BoundsError, ContractError, ShapeError

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MemoryMeter:
    """Opt-in live-byte accounting over tensor data and gradient buffers.

    Disabled by default so the hot path pays nothing; the timing harness
    enables it around its measurement phase.
    """

    def __init__(self):
        self.enabled = False
        self.current = 0
        self.peak = 0

    def enable(self):
        self.enabled = True
        self.current = 0
        self.peak = 0

    def disable(self):
        self.enabled = False

    def add(self, nbytes):
        self.current += nbytes
        if self.current > self.peak:
            self.peak = self.current

    def sub(self, nbytes):
        self.current -= nbytes

    def track(self, tensor):
        # holder mutates as grad buffers come and go on this tensor
        holder = [tensor.data.nbytes]
        tensor._meter_holder = holder
        self.add(holder[0])
        weakref.finalize(tensor, self._release, holder)

    def _release(self, holder):
        self.sub(holder[0])
        holder[0] = 0


meter = MemoryMeter()


class Tensor:
    """A contiguous row-major float64 array plus optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_meter_holder", "__weakref__")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr) if arr.ndim > 0 else arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._meter_holder = None
        if meter.enabled:
            meter.track(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self):
        self._drop_grad()

    def _drop_grad(self):
        if self.grad is not None:
            if self._meter_holder is not None:
                meter.sub(self.grad.nbytes)
                self._meter_holder[0] -= self.grad.nbytes
            self.grad = None

    def _accumulate(self, g, owned=False):
        """Add `g` into the grad slot.

        `owned=True` promises `g` is a freshly produced array (or a view of
        a buffer no other backward step will touch again), so the first
        contribution can be adopted without copying.
        """
        if self.grad is None:
            if owned and g.dtype == np.float64:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64, copy=True)
            if self._meter_holder is not None:
                meter.add(self.grad.nbytes)
                self._meter_holder[0] += self.grad.nbytes
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are lifted on the fly
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _make(data, parents, backward_fn):
    out = Tensor(data, requires_grad=True)
    out._parents = parents
    out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    data = a.data + b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    data = a.data - b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape), owned=True)

    return _make(data, (a, b), backward)


def mul(a, b):
    data = a.data * b.data
    if not _tracked(a, b):
        return Tensor(data)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), owned=True)

    return _make(data, (a, b), backward)


def scale(a, s):
    s = float(s)
    data = a.data * s
    if not _tracked(a):
        return Tensor(data)

    def backward(out):
        a._accumulate(out.grad * s, owned=True)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b):
    """Matrix product with numpy batching over leading dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)
    if not _tracked(a, b):
        return Tensor(data)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape), owned=True)

    return _make(data, (a, b), backward)


def transpose(a, axes):
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    if not _tracked(a):
        return Tensor(data)
    inverse = tuple(np.argsort(axes))

    def backward(out):
        a._accumulate(np.transpose(out.grad, inverse), owned=True)

    return _make(data, (a,), backward)


def reshape(a, shape):
    shape = tuple(shape)
    data = a.data.reshape(shape)
    if not _tracked(a):
        return Tensor(data)
    old = a.data.shape

    def backward(out):
        a._accumulate(out.grad.reshape(old), owned=True)

    return _make(data, (a,), backward)


def broadcast_to(a, shape):
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)
    if not _tracked(a):
        return Tensor(data)

    def backward(out):
        g = _unbroadcast(out.grad, a.data.shape)
        a._accumulate(g, owned=g is not out.grad)

    return _make(data, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return Tensor(data)
    shape = a.data.shape

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, shape))

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _tracked(*tensors):
        return Tensor(data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)], owned=True)

    return _make(data, tuple(tensors), backward)


def tslice(a, axis, start, length):
    extent = a.data.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise BoundsError(
            f"slice [{start}:{start + length}) exceeds axis {axis} of extent {extent}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]
    if not _tracked(a):
        return Tensor(data)
    shape = a.data.shape

    def backward(out):
        g = np.zeros(shape, dtype=np.float64)
        g[index] = out.grad
        a._accumulate(g, owned=True)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# fused neural-network primitives

def softmax(x, axis=-1):
    """Stable softmax along `axis` (max-subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    if not _tracked(x):
        return Tensor(data)

    def backward(out):
        g = out.grad
        y = out.data
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - inner), owned=True)

    return _make(data, (x,), backward)


def layernorm(x, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data
    if not _tracked(x, gain, bias):
        return Tensor(data)

    def backward(out):
        g = out.grad
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0), owned=True)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0), owned=True)
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx_hat - m1 - xhat * m2), owned=True)

    return _make(data, (x, gain, bias), backward)


def gelu(x):
    """Gaussian error linear unit (tanh formulation)."""
    x2 = x.data * x.data
    u = x2 * _GELU_K
    u += 1.0
    u *= x.data
    u *= _GELU_C
    t = np.tanh(u)
    half = t * 0.5
    half += 0.5  # 0.5 * (1 + tanh(u))
    data = x.data * half
    if not _tracked(x):
        return Tensor(data)

    def backward(out):
        du = x2 * (3.0 * _GELU_K)
        du += 1.0
        du *= _GELU_C
        q = t * t
        q -= 1.0
        q *= -0.5  # 0.5 * (1 - tanh^2)
        q *= du
        q *= x.data
        q += half
        q *= out.grad
        x._accumulate(q, owned=True)

    return _make(data, (x,), backward)


def crossentropy(logits, labels):
    """Mean cross-entropy of integer labels; scalar output.

    Accepts a single [C] row with an int label or an [B, C] batch with [B]
    labels. Uses log-sum-exp so huge logits stay finite.
    """
    data2d = logits.data if logits.ndim == 2 else logits.data[None, :]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = data2d.shape
    if lab.shape != (n,):
        raise ShapeError(f"labels shape {lab.shape} does not match logits batch {n}")
    if lab.min() < 0 or lab.max() >= c:
        raise BoundsError(f"label outside [0, {c})")
    m = data2d.max(axis=1, keepdims=True)
    z = data2d - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    picked = data2d[np.arange(n), lab]
    data = np.float64((lse - picked).mean())
    if not _tracked(logits):
        return Tensor(data)

    def backward(out):
        g = float(out.grad)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), lab] -= 1.0
        p *= g / n
        logits._accumulate(p if logits.ndim == 2 else p[0], owned=True)

    return _make(data, (logits,), backward)


def linear(x, weight, bias=None):
    """Fused x @ weight + bias; weight is [k, n], bias a length-n vector."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear cannot apply weight {weight.shape} to input {x.shape}")
    data = np.matmul(x.data, weight.data)
    if bias is not None:
        if bias.data.shape != (weight.shape[1],):
            raise ShapeError(f"linear bias {bias.shape} does not match weight {weight.shape}")
        data += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    if not _tracked(*parents):
        return Tensor(data)

    def backward(out):
        g = out.grad
        if x.requires_grad:
            x._accumulate(np.matmul(g, weight.data.T), owned=True)
        if weight.requires_grad:
            gw = np.matmul(np.swapaxes(x.data, -1, -2), g)
            weight._accumulate(_unbroadcast(gw, weight.data.shape), owned=True)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0), owned=True)

    return _make(data, parents, backward)


# ---------------------------------------------------------------------------
# custom linear operators (used by the spectral transforms)

def linear_map_op(x, forward_fn, adjoint_fn):
    """Register a fixed linear map with an explicit adjoint.

    `forward_fn` and `adjoint_fn` act on plain arrays; the adjoint is
    applied to the output gradient on the backward sweep.
    """
    data = forward_fn(x.data)
    if not _tracked(x):
        return Tensor(data)

    def backward(out):
        x._accumulate(adjoint_fn(out.grad), owned=True)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# backward sweep

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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate `.grad` on every tracked leaf below `loss`, then free the graph."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None and not loss.requires_grad:
        raise ContractError("loss is not connected to any tracked tensor")
    order = _topo_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
    # tear down: break closure cycles and drop intermediate grads so buffers
    # free promptly and leaf tensors are all that remain
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._drop_grad()
