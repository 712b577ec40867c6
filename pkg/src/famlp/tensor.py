"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the output
tensor, so the computation graph lives in the tensors themselves and is
garbage-collected once the outputs go out of scope.  Creation order is a
topological order of the graph, which lets ``backward`` traverse nodes in
reverse creation order without an explicit sort.

Gradients accumulate on leaf tensors (parameters and inputs created with
``requires_grad=True``) until ``zero_grad`` is called; interior node
gradients are staged in a per-call buffer so that repeated backward passes
scale leaf gradients linearly.
"""

from __future__ import annotations

import itertools
import math
import struct
import threading

import numpy as np
from scipy.special import erf

_SEQ = itertools.count()
_LOCAL = threading.local()

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _grad_enabled():
    return getattr(_LOCAL, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (inference mode)."""

    def __enter__(self):
        self._saved = _grad_enabled()
        _LOCAL.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.grad_enabled = self._saved
        return False


class Tensor:
    """Dense real-valued n-dimensional array with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = next(_SEQ)

    # -- introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- graph plumbing ------------------------------------------------

    def detach(self):
        """Same data, severed from the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = _coerce(other)
        out = self.data + other.data

        def back(g):
            if self.requires_grad:
                _add_grad(self, _unbroadcast(g, self.data.shape))
            if other.requires_grad:
                _add_grad(other, _unbroadcast(g, other.data.shape))

        return _from_op(out, (self, other), back)

    __radd__ = __add__

    def __sub__(self, other):
        other = _coerce(other)
        out = self.data - other.data

        def back(g):
            if self.requires_grad:
                _add_grad(self, _unbroadcast(g, self.data.shape))
            if other.requires_grad:
                _add_grad(other, _unbroadcast(-g, other.data.shape))

        return _from_op(out, (self, other), back)

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        other = _coerce(other)
        out = self.data * other.data

        def back(g):
            if self.requires_grad:
                _add_grad(self, _unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                _add_grad(other, _unbroadcast(g * self.data, other.data.shape))

        return _from_op(out, (self, other), back)

    __rmul__ = __mul__

    def __neg__(self):
        def back(g):
            if self.requires_grad:
                _add_grad(self, -g)

        return _from_op(-self.data, (self,), back)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return self * (1.0 / float(other))

    def matmul(self, other):
        other = _coerce(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
        out = np.matmul(a, b)

        def back(g):
            if self.requires_grad:
                if b.ndim == 2 and a.ndim > 2:
                    # one flat GEMM instead of per-batch products + reduce
                    ga = np.matmul(g.reshape(-1, g.shape[-1]), b.T).reshape(a.shape)
                else:
                    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
                _add_grad(self, ga)
            if other.requires_grad:
                if b.ndim == 2 and g.ndim > 2:
                    flat_a = np.ascontiguousarray(a).reshape(-1, a.shape[-1])
                    gb = flat_a.T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
                _add_grad(other, gb)

        return _from_op(out, (self, other), back)

    __matmul__ = matmul

    # -- shape ops -----------------------------------------------------

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = tuple(np.argsort(axes))
        out = np.transpose(self.data, axes)

        def back(g):
            if self.requires_grad:
                _add_grad(self, np.transpose(g, inv))

        return _from_op(out, (self,), back)

    @property
    def T(self):
        return self.transpose()

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out = self.data.reshape(shape)

        def back(g):
            if self.requires_grad:
                _add_grad(self, g.reshape(orig))

        return _from_op(out, (self,), back)

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None):
        out = self.data.sum(axis=axis)

        def back(g):
            if self.requires_grad:
                _add_grad(self, _spread(g, self.data.shape, axis))

        return _from_op(out, (self,), back)

    def mean(self, axis=None):
        out = self.data.mean(axis=axis)
        n = self.data.size if axis is None else _axis_size(self.data.shape, axis)

        def back(g):
            if self.requires_grad:
                _add_grad(self, _spread(g, self.data.shape, axis) / n)

        return _from_op(out, (self,), back)


# ---------------------------------------------------------------------
# op helpers
# ---------------------------------------------------------------------


def _scalar_err(t):
    raise ValueError(f"expected a scalar tensor, got shape {t.shape}")


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, back):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
    return out


def _add_grad(t, g):
    """Route a gradient contribution to a node.

    Interior nodes stage into the active traversal buffer; leaves
    accumulate persistently on ``.grad``.
    """
    buf = getattr(_LOCAL, "grad_buffer", None)
    if buf is not None and t._backward is not None:
        key = id(t)
        if key in buf:
            buf[key] += g
        else:
            buf[key] = np.array(g, dtype=np.float64, copy=True)
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _axis_size(shape, axis):
    if isinstance(axis, tuple):
        return int(np.prod([shape[a] for a in axis]))
    return shape[axis]


def _spread(g, shape, axis):
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g, shape).astype(np.float64)
    axes = axis if isinstance(axis, tuple) else (axis,)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).astype(np.float64)


# ---------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------


def backward(loss):
    """Reverse-mode pass from a scalar loss.

    Leaf gradients accumulate across calls until zeroed; a second pass
    over the same graph therefore doubles them.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        if loss.requires_grad:
            _add_grad(loss, np.ones_like(loss.data))
        return

    # Collect recorded nodes reachable from the loss.
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    buf = {id(loss): np.ones_like(loss.data)}
    _LOCAL.grad_buffer = buf
    try:
        for t in nodes:
            g = buf.pop(id(t), None)
            if g is None:
                continue
            t._backward(g)
    finally:
        _LOCAL.grad_buffer = None


# ---------------------------------------------------------------------
# nonlinearities and losses
# ---------------------------------------------------------------------


def gelu(x):
    """x * Phi(x) with the exact Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    out = xd * cdf

    def back(g):
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
            _add_grad(x, g * (cdf + xd * pdf))

    return _from_op(out, (x,), back)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.data.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ValueError("layer_norm over an empty last axis")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(
            f"affine parameters must have shape ({d},), got {gamma.data.shape} and {beta.data.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def back(g):
        if beta.requires_grad:
            _add_grad(beta, g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            _add_grad(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _add_grad(x, inv * (dxhat - m1 - xhat * m2))

    return _from_op(out, (x, gamma, beta), back)


def softmax(x, temperature=1.0):
    """Temperature-softened softmax over the last axis, max-shifted for stability."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = (x.data - x.data.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            _add_grad(x, y * (g - inner) / temperature)

    return _from_op(y, (x,), back)


def log_softmax(x, temperature=1.0):
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = (x.data - x.data.max(axis=-1, keepdims=True)) / temperature
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        if x.requires_grad:
            y = np.exp(out)
            _add_grad(x, (g - y * g.sum(axis=-1, keepdims=True)) / temperature)

    return _from_op(out, (x,), back)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    b, k = logits.data.shape
    idx = np.asarray(labels, dtype=np.int64)
    if idx.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= k:
        raise IndexError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    logp = z - np.log(e.sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(b), idx].mean()

    def back(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(b), idx] -= 1.0
            _add_grad(logits, g * d / b)

    return _from_op(loss, (logits,), back)


def kl_divergence(p_logprobs, q_probs):
    """Mean over the batch of sum_k q * (log q - log p), with 0*log0 := 0.

    ``p_logprobs`` holds log-probabilities, ``q_probs`` probabilities; the
    result is D_KL(q || p) averaged over rows.
    """
    lp, q = p_logprobs.data, q_probs.data
    if lp.shape != q.shape or lp.ndim != 2:
        raise ValueError(f"expected matching [batch, classes] inputs, got {lp.shape} and {q.shape}")
    if (q < 0).any():
        raise ValueError("q_probs must be nonnegative")
    b = q.shape[0]
    pos = q > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = np.where(pos, np.log(np.where(pos, q, 1.0)), 0.0)
    terms = np.where(pos, q * (logq - lp), 0.0)
    loss = terms.sum() / b

    def back(g):
        if p_logprobs.requires_grad:
            _add_grad(p_logprobs, -g * q / b)
        if q_probs.requires_grad:
            _add_grad(q_probs, np.where(pos, g * (logq - lp + 1.0) / b, 0.0))

    return _from_op(loss, (p_logprobs, q_probs), back)


# ---------------------------------------------------------------------
# binary serialization
# ---------------------------------------------------------------------

MAGIC = b"FAMT"
FORMAT_VERSION = 1


def write_tensor_to(f, tensor):
    """Write one tensor record: magic, version u32, ndim u32, dims u64, float64 payload."""
    arr = np.ascontiguousarray(tensor.data if isinstance(tensor, Tensor) else tensor, dtype="<f8")
    f.write(MAGIC)
    f.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes())


def read_tensor_from(f):
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    version, ndim = struct.unpack("<II", f.read(8))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
    count = int(np.prod(dims)) if ndim else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return Tensor(arr)


def save_tensor(tensor, path):
    with open(path, "wb") as f:
        write_tensor_to(f, tensor)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor_from(f)
