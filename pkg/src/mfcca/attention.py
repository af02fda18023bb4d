"""Single-channel and cross-channel multi-head attention.

All functions accept optional leading batch axes. Multi-channel inputs are
laid out ``[..., C, T, D]`` (channel, time, feature).

Variants:

* :func:`single_channel_attention` - self-attention over time of one sequence.
* :func:`flcca` - frame-level: each channel queries the mean of the *other*
  channels, attending over time.
* :func:`clcca` - channel-level: at every time step the C channel vectors
  attend to each other.
* :func:`mfcca` - multi-frame: at every time step each channel vector
  attends to all channels in a window of ``2F+1`` frames.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class AttentionParams:
    """Multi-head projection weights.

    Head ``i`` uses columns ``i*d_h:(i+1)*d_h`` of ``wq``, ``wk`` and ``wv``;
    heads are concatenated and mapped back to width D by ``wo``/``bo``.
    """

    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    def __post_init__(self):
        D = self.wq.shape[0]
        if self.heads < 1 or D % self.heads:
            raise ContractError(f"model dim {D} is not divisible by {self.heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (D, D):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(D, D)}")
        for name in ("bq", "bk", "bv", "bo"):
            if getattr(self, name).shape != (D,):
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {(D,)}")

    @property
    def model_dim(self):
        return self.wq.shape[0]

    @property
    def head_dim(self):
        return self.model_dim // self.heads

    def tensors(self):
        return [getattr(self, n) for n in self.NAMES]

    @classmethod
    def from_arrays(cls, heads, arrays, requires_grad=False):
        return cls(heads, *(Tensor(arrays[n], requires_grad) for n in cls.NAMES))

    @classmethod
    def init(cls, model_dim, heads, rng, requires_grad=False):
        """Xavier-uniform weights, zero biases."""
        bound = np.sqrt(6.0 / (2 * model_dim))
        arrays = {}
        for n in cls.NAMES:
            if n.startswith("w"):
                arrays[n] = rng.uniform(-bound, bound, size=(model_dim, model_dim))
            else:
                arrays[n] = np.zeros(model_dim)
        return cls.from_arrays(heads, arrays, requires_grad)


@dataclass(frozen=True)
class ContextConfig:
    """Context radius F for :func:`stack_context`; frames outside the
    sequence are zero."""

    F: int = 2
    padding: str = "zero"

    def __post_init__(self):
        if self.F < 0:
            raise ContractError(f"context radius must be >= 0, got {self.F}")
        if self.padding != "zero":
            raise ContractError(f"unsupported padding {self.padding!r}")

    @property
    def width(self):
        return 2 * self.F + 1


@dataclass
class AttentionTrace:
    """Attention distributions with named axes; the last axis is the key axis."""

    weights: np.ndarray
    layout: tuple

    def key_sums(self):
        return self.weights.sum(axis=-1)


def _heads_first(x, heads):
    # [..., L, D] -> [..., h, L, d_h]
    lead = x.shape[:-2]
    L, D = x.shape[-2:]
    x = x.reshape(lead + (L, heads, D // heads))
    n = x.ndim
    return x.permute(tuple(range(n - 3)) + (n - 2, n - 3, n - 1))


def _heads_last(x):
    # [..., h, L, d_h] -> [..., L, h*d_h]
    n = x.ndim
    x = x.permute(tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def multi_head_attention(q_in, kv_in, p, mask=None):
    """Scaled dot-product attention of ``q_in`` [...,Lq,D] over ``kv_in`` [...,Lk,D].

    Returns the projected output [...,Lq,D] and the weights [...,h,Lq,Lk].
    ``mask`` (boolean, broadcastable to the weights) marks allowed keys.
    """
    q_in, kv_in = tn.as_tensor(q_in), tn.as_tensor(kv_in)
    D = p.model_dim
    if q_in.shape[-1] != D or kv_in.shape[-1] != D:
        raise DimensionError(
            f"attention inputs {q_in.shape} and {kv_in.shape} do not match model dim {D}")
    q = _heads_first(tn.linear(q_in, p.wq, p.bq), p.heads)
    k = _heads_first(tn.linear(kv_in, p.wk, p.bk), p.heads)
    v = _heads_first(tn.linear(kv_in, p.wv, p.bv), p.heads)
    scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(p.head_dim))
    weights = tn.softmax_lastdim(scores, mask)
    out = tn.linear(_heads_last(tn.matmul(weights, v)), p.wo, p.bo)
    return out, weights


def _channels_of(x):
    if x.ndim < 3:
        raise DimensionError(f"multi-channel input must be [..., C, T, D], got {x.shape}")
    return x.shape[-3]


def leave_one_out_mean(x):
    """Channel c of the output is the mean of every channel except c."""
    x = tn.as_tensor(x)
    C = _channels_of(x)
    if C < 2:
        raise ContractError("leave-one-out mean needs at least 2 channels")
    total = x.sum(axis=-3, keepdims=True)
    return (total - x) * (1.0 / (C - 1))


def stack_context(x, cfg):
    """Build the key/value rows of multi-frame attention.

    ``x`` [...,C,T,D] -> [...,T,(2F+1)*C,D]. Row t lists frames t-F..t+F of
    every channel, offset-major: (offset -F, ch 0..C-1), ..., (offset +F,
    ch 0..C-1). Frames outside [0,T) are zeros.
    """
    x = tn.as_tensor(x)
    C = _channels_of(x)
    T = x.shape[-2]
    if T < 1:
        raise DimensionError("stack_context needs at least one frame")
    F = cfg.F
    padded = tn.zero_pad(x, -2, F, F) if F else x
    lead = (slice(None),) * (x.ndim - 2)
    frames = [padded[lead + (slice(o, o + T), slice(None))] for o in range(2 * F + 1)]
    st = tn.stack(frames, axis=-4)  # [..., 2F+1, C, T, D]
    n = st.ndim
    st = st.permute(tuple(range(n - 4)) + (n - 2, n - 4, n - 3, n - 1))
    return st.reshape(st.shape[:-3] + ((2 * F + 1) * C, x.shape[-1]))


def single_channel_attention(x, p):
    """Self-attention over time; ``x`` is [..., T, D]."""
    out, w = multi_head_attention(x, x, p)
    return out, AttentionTrace(w.data, ("head", "query_time", "key_time"))


def flcca(x, p):
    x = tn.as_tensor(x)
    if _channels_of(x) < 2:
        raise ContractError("frame-level cross-channel attention needs at least 2 channels")
    out, w = multi_head_attention(x, leave_one_out_mean(x), p)
    return out, AttentionTrace(w.data, ("channel", "head", "query_time", "key_time"))


def _time_major(x):
    return tn.swapaxes(x, -3, -2)


def clcca(x, p):
    x = tn.as_tensor(x)
    _channels_of(x)
    xt = _time_major(x)
    out, w = multi_head_attention(xt, xt, p)
    return _time_major(out), AttentionTrace(w.data, ("time", "head", "query_channel", "key_channel"))


def mfcca(x, p, cfg):
    """Multi-frame cross-channel attention.

    The trace is laid out (time, head, query channel, key) with the key axis
    ordered as in :func:`stack_context`.
    """
    x = tn.as_tensor(x)
    _channels_of(x)
    out, w = multi_head_attention(_time_major(x), stack_context(x, cfg), p)
    return _time_major(out), AttentionTrace(w.data, ("time", "head", "query_channel", "key"))


VARIANTS = {
    "flcca": lambda x, p, cfg: flcca(x, p),
    "clcca": lambda x, p, cfg: clcca(x, p),
    "mfcca": mfcca,
}
