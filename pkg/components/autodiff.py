"""
Reverse-mode automatic differentiation on numpy arrays.

Graphs are define-by-run: every primitive records its parents and a
backward closure on the output tensor, and `backward` walks the
recorded graph in reverse topological order. 64-bit floats throughout.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config.settings import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from utils.errors import NumericError, ShapeError, UsageError

logger = logging.getLogger(__name__)

_mode = threading.local()


def grad_enabled():
    return getattr(_mode, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (rollouts, evaluation)."""
    previous = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


@contextlib.contextmanager
def frozen(params):
    """Stop gradient into `params` for the duration of the block."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


# ---------------------------------------
# Tensor
# ---------------------------------------
class DiffTensor:
    """n-dimensional float64 array that can take part in a graph."""

    __slots__ = ('data', 'requires_grad', 'grad', 'name', 'op', '_parents', '_backward')

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.op = 'leaf'
        self._parents = ()
        self._backward = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return DiffTensor(self.data.copy())

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"DiffTensor(shape={self.shape}, op={self.op}{label})"

    # arithmetic sugar
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
        if isinstance(other, DiffTensor):
            raise UsageError("division is only defined by a scalar constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(value):
    return value if isinstance(value, DiffTensor) else DiffTensor(value)


def parameter(data, name):
    return DiffTensor(data, requires_grad=True, name=name)


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


def _record(out_data, op, parents, backward_fn):
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NumericError(op)
    out = DiffTensor.__new__(DiffTensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------
# Elementwise primitives
# ---------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, 'add', (a, b), backward_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, 'sub', (a, b), backward_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record(a.data * b.data, 'mul', (a, b), backward_fn)


def neg(x):
    x = as_tensor(x)
    return _record(-x.data, 'neg', (x,), lambda g: (-g,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _record(x.data * mask, 'relu', (x,), lambda g: (g * mask,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, 'tanh', (x,), lambda g: (g * (1.0 - y * y),))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _record(y, 'exp', (x,), lambda g: (g * y,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError('log', "log of non-positive value")
    return _record(np.log(x.data), 'log', (x,), lambda g: (g / x.data,))


def absolute(x):
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _record(np.abs(x.data), 'abs', (x,), lambda g: (g * sign,))


def clip(x, low, high):
    """Elementwise clip; gradient passes where low <= x <= high."""
    x = as_tensor(x)
    mask = (x.data >= low) & (x.data <= high)
    return _record(np.clip(x.data, low, high), 'clip', (x,), lambda g: (g * mask,))


def minimum(a, b):
    """Elementwise min; ties send the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward_fn(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _record(np.where(pick_a, a.data, b.data), 'minimum', (a, b), backward_fn)


# ---------------------------------------
# Reductions and shape ops
# ---------------------------------------
def tensor_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, 'sum', (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis, keepdims), 1.0 / float(count))


def reshape(x, shape):
    x = as_tensor(x)
    return _record(x.data.reshape(shape), 'reshape', (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), 'transpose', (x,),
                   lambda g: (np.transpose(g, inverse),))


def gather(x, index):
    """Pick x[..., index[...]] along the last axis."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"gather index shape {index.shape} vs tensor {x.shape}")
    picked = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, index[..., None], g[..., None], axis=-1)
        return (out,)

    return _record(picked, 'gather', (x,), backward_fn)


# ---------------------------------------
# Linear algebra
# ---------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")

    def backward_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(np.matmul(a.data, b.data), 'matmul', (a, b), backward_fn)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """
    2-D cross-correlation.

    x: (batch, in_ch, H, W), weight: (out_ch, in_ch, kh, kw), bias: (out_ch,)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d of input {x.shape} with weight {weight.shape}")

    _, _, height, width = x.shape
    kh, kw = weight.shape[2:]
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {padded.shape[2:]}")

    # (B, C, Ho, Wo, kh, kw)
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents = (x, weight, bias)

    def backward_fn(g):
        out_h, out_w = g.shape[2:]
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_windows = np.tensordot(g, weight.data, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                    grad_windows[..., i, j].transpose(0, 3, 1, 2)
                )
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        grads = (grad_x, grad_w)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _record(out, 'conv2d', parents, backward_fn)


# ---------------------------------------
# Softmax family (last axis)
# ---------------------------------------
def softmax(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, 'softmax', (x,), backward_fn)


def log_softmax(x):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record(out, 'log_softmax', (x,), backward_fn)


# ---------------------------------------
# Graph + backward pass
# ---------------------------------------
@dataclass
class ComputationGraph:
    """Topologically ordered nodes; every node's inputs precede it."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss):
        order, visited = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def backward(loss):
    """
    Populate .grad on every requires_grad leaf reachable from `loss`.

    Leaf gradients accumulate; call zero_grad first for a fresh pass.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return ComputationGraph([])

    graph = ComputationGraph.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(node.name or node.op, "non-finite gradient")
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else np.asarray(node.grad + g)
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    return graph


def finite_difference_check(build_loss, params, eps=1e-5):
    """
    Max over all parameter entries of
    |analytic - central difference| / max(1, |analytic|).
    """
    if not 0 < eps <= 1e-2:
        raise UsageError(f"eps must lie in (0, 1e-2], got {eps}")

    zero_grad(params)
    backward(build_loss())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            for index in np.ndindex(p.shape):
                original = p.data[index]
                p.data[index] = original + eps
                plus = build_loss().item()
                p.data[index] = original - eps
                minus = build_loss().item()
                p.data[index] = original
                numeric = (plus - minus) / (2.0 * eps)
                error = abs(grad[index] - numeric) / max(1.0, abs(grad[index]))
                worst = max(worst, error)
    return worst


# ---------------------------------------
# Gradient clipping + optimizer
# ---------------------------------------
def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global_norm(params, max_norm):
    """Scale all grads by max_norm / norm when the global L2 norm exceeds max_norm."""
    if not max_norm > 0:
        raise UsageError(f"max_norm must be > 0, got {max_norm}")
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = np.asarray(p.grad * factor)
    return factor


@dataclass
class AdamState:
    """First/second moments per parameter (same order as the parameter list)."""

    m: list
    v: list
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, state, lr):
    """One bias-corrected Adam update. Parameters are replaced, not edited in place."""
    if len(params) != len(state.m):
        raise UsageError("optimizer state was built for a different parameter list")
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter '{p.name}' has no gradient")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for i, p in enumerate(params):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * p.grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * p.grad * p.grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        p.data = np.asarray(p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return params, state


def orthogonal(rng, shape, gain=1.0):
    """Orthogonal init over the flattened fan-in (conv weights included)."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    matrix = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(matrix)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols].reshape(shape)
