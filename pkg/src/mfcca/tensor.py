"""Dense float64 tensors with a per-call reverse-mode tape.

A :class:`Tensor` wraps a read-only float64 ndarray. Operations on tensors
that require gradients record their parents and a backward rule; calling
:func:`backward` on a scalar walks that tape once in reverse topological
order. Nothing is cached between forward calls.

:func:`finite_difference` is the independent oracle: it never touches the
tape, only evaluates a scalar function of a plain array.
"""

import contextlib
import math

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, NumericError

# Names of primitives whose backward rule is sign-flipped. Test-only hook used
# to prove the gradient suite catches a broken rule.
FAULTS = set()
OPS = frozenset({
    "add", "concat", "conv2d", "depthwise_conv1d", "div", "embedding", "exp", "getitem",
    "glu", "layer_norm", "log", "log_softmax", "matmul", "mul", "permute", "reshape",
    "sigmoid", "softmax", "sub", "sum", "swish", "zero_pad",
})

_RECORDING = [True]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape (inference)."""
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


class Tensor:
    """Immutable float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
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

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    data.flags.writeable = False
    out.data = data
    out.op = op
    out.requires_grad = _RECORDING[0] and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
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
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def swish(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def bw(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _make(x.data * s, (x,), bw, "swish")


def glu(x, axis=-1):
    """Gated linear unit: first half times sigmoid of second half along ``axis``."""
    x = as_tensor(x)
    n = x.shape[axis]
    if n % 2:
        raise DimensionError(f"glu needs an even extent on axis {axis}, got shape {x.shape}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return _make(a * s, (x,), bw, "glu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return _make(y, (x,), lambda g: (g.transpose(inv),), "permute")


def swapaxes(x, a, b):
    axes = list(range(as_tensor(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def getitem(x, idx):
    """Basic (slice/integer) indexing. Advanced indexing is not supported."""
    x = as_tensor(x)
    y = x.data[idx]

    def bw(g):
        out = np.zeros(x.shape)
        out[idx] = g
        return (out,)

    return _make(np.array(y), (x,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(y, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim + 1
    axis = axis % nd
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def zero_pad(x, axis, before, after):
    x = as_tensor(x)
    axis = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    y = np.pad(x.data, widths)
    n = x.shape[axis]

    def bw(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return _make(y, (x,), bw, "zero_pad")


def embedding(table, ids):
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"ids out of range for table of shape {table.shape}")

    def bw(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(y, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` of shape [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax_lastdim(x, mask=None):
    """Softmax over the last axis with max subtraction.

    ``mask`` is an optional boolean array broadcastable to ``x``; False
    entries get probability exactly 0 and take no part in the max or the
    normaliser. Each slice needs at least one True entry.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got {x.shape}")
    v = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax mask hides an entire slice")
        v = np.where(mask, v, -np.inf)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax_lastdim(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax needs a non-empty last dimension, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} do not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gh = g * gain.data
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv2d(x, kernels, bias):
    """Same-padded 2-D cross-correlation.

    ``x`` is [Cin,H,W] or [B,Cin,H,W]; ``kernels`` is [Cout,Cin,kh,kw] with
    odd kh, kw; output keeps the spatial extents of the input.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d kernels must be rank 4, got {kernels.shape}")
    cout, cin, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kernels.shape}")
    if x.ndim not in (3, 4) or x.shape[-3] != cin:
        raise DimensionError(f"conv2d input {x.shape} does not match kernels {kernels.shape}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias {bias.shape} does not match kernels {kernels.shape}")
    xb = x.data if x.ndim == 4 else x.data[None]
    xb = np.ascontiguousarray(xb)
    y = _kernels.conv2d_forward(xb, kernels.data, bias.data)

    def bw(g):
        gb4 = g if x.ndim == 4 else g[None]
        gx, gw, gbias = _kernels.conv2d_backward(xb, kernels.data, gb4)
        return gx.reshape(x.shape), gw, gbias

    return _make(y if x.ndim == 4 else y[0], (x, kernels, bias), bw, "conv2d")


def depthwise_conv1d(x, weight, bias):
    """Per-feature same-padded correlation along axis -2 of ``x`` [...,T,D].

    ``weight`` is [D,k] with odd k, ``bias`` is [D].
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    D = x.shape[-1]
    if weight.ndim != 2 or weight.shape[0] != D or weight.shape[1] % 2 == 0:
        raise DimensionError(f"depthwise weight {weight.shape} does not fit input {x.shape}")
    if bias.shape != (D,):
        raise DimensionError(f"depthwise bias {bias.shape} does not fit input {x.shape}")
    x3 = np.ascontiguousarray(x.data.reshape(-1, x.shape[-2], D))
    y = _kernels.dwconv_forward(x3, weight.data, bias.data)

    def bw(g):
        gx, gw, gb = _kernels.dwconv_backward(x3, weight.data, g.reshape(x3.shape))
        return gx.reshape(x.shape), gw, gb

    return _make(y.reshape(x.shape), (x, weight, bias), bw, "depthwise_conv1d")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root):
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


def backward(loss, leaves):
    """Gradients of a scalar ``loss`` with respect to each tensor in ``leaves``.

    Returns a dict keyed by leaf. Leaves the loss does not depend on get
    zero gradients.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones(())}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            if node._backward is None:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            parent_grads = node._backward(g)
            if node.op in FAULTS:
                parent_grads = tuple(None if pg is None else -pg for pg in parent_grads)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    out = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
    return out


def grad(loss, leaves):
    """List form of :func:`backward`."""
    table = backward(loss, leaves)
    return [table[leaf] for leaf in leaves]


def finite_difference(f, x, eps=1e-4):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return out


class Rng:
    """Deterministic random stream: numpy PCG64 seeded through SeedSequence.

    ``Rng(seed, *keys)`` derives an independent stream for each key tuple,
    so per-utterance or per-epoch streams can be rebuilt without replaying
    earlier draws. Unknown attributes delegate to the wrapped
    ``numpy.random.Generator``.
    """

    algorithm = "PCG64/SeedSequence"

    def __init__(self, seed, *keys):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys):
        return Rng(self.seed, *self.keys, *keys)

    def __getattr__(self, name):
        return getattr(self.generator, name)
