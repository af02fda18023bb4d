"""Multi-channel Conformer encoder and convolution fusion.

Layer order (each sub-block pre-norm with a residual connection)::

    x + 1/2 FFN  ->  x + cross-channel attention  ->  x + temporal MHSA
      ->  x + CONV  ->  x + 1/2 FFN  ->  LayerNorm

Every sub-block shares its parameters across channels, so a layer commutes
with any permutation of the channel axis.
"""

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import tensor as tn
from .errors import ContractError, DimensionError


def encoder_layer_shapes(model_dim, ffn_dim, conv_kernel):
    D = model_dim
    shapes = {}
    for blk in ("ffn1", "ffn2"):
        shapes.update({
            f"{blk}.ln.g": (D,), f"{blk}.ln.b": (D,),
            f"{blk}.w1": (D, ffn_dim), f"{blk}.b1": (ffn_dim,),
            f"{blk}.w2": (ffn_dim, D), f"{blk}.b2": (D,),
        })
    for blk in ("mfcca", "mhsa"):
        shapes[f"{blk}.ln.g"] = (D,)
        shapes[f"{blk}.ln.b"] = (D,)
        for n in att.AttentionParams.NAMES:
            shapes[f"{blk}.{n}"] = (D, D) if n.startswith("w") else (D,)
    shapes.update({
        "conv.ln.g": (D,), "conv.ln.b": (D,),
        "conv.pw1.w": (D, 2 * D), "conv.pw1.b": (2 * D,),
        "conv.dw.w": (D, conv_kernel), "conv.dw.b": (D,),
        "conv.norm.g": (D,), "conv.norm.b": (D,),
        "conv.pw2.w": (D, D), "conv.pw2.b": (D,),
        "final.g": (D,), "final.b": (D,),
    })
    return shapes


# Parameters whose zeroing silences a residual branch.
RESIDUAL_OUTPUTS = (
    "ffn1.w2", "ffn1.b2", "mfcca.wo", "mfcca.bo", "mhsa.wo", "mhsa.bo",
    "conv.pw2.w", "conv.pw2.b", "ffn2.w2", "ffn2.b2",
)


@dataclass
class EncoderLayerParams:
    tensors: dict
    heads: int
    attention: str = "mfcca"

    def attn(self, block):
        t = self.tensors
        return att.AttentionParams(self.heads, *(t[f"{block}.{n}"] for n in att.AttentionParams.NAMES))

    def __getitem__(self, name):
        return self.tensors[name]


@dataclass
class FusionParams:
    channels: int
    kernels: list
    biases: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.kernels) != 5 or len(self.biases) != 5:
            raise ContractError("convolution fusion has exactly five layers")
        if self.kernels[0].shape[1] != self.channels or self.kernels[-1].shape[0] != 1:
            raise ContractError(
                f"fusion kernels must map {self.channels} channels down to 1, got "
                f"{[k.shape for k in self.kernels]}")

    def tensors(self):
        return [*self.kernels, *self.biases]


def fusion_schedule(channels):
    """Output maps of the five fusion layers, e.g. 8 -> 4,4,2,2,1."""
    half = max(channels // 2, 1)
    quarter = max(channels // 4, 1)
    return [half, half, quarter, quarter, 1]


def fusion_shapes(channels, kernel=3):
    shapes = {}
    cin = channels
    for i, cout in enumerate(fusion_schedule(channels)):
        shapes[f"{i}.w"] = (cout, cin, kernel, kernel)
        shapes[f"{i}.b"] = (cout,)
        cin = cout
    return shapes


def _ln(x, p, name):
    return tn.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _ffn(x, p, blk):
    h = tn.swish(tn.linear(_ln(x, p, f"{blk}.ln"), p[f"{blk}.w1"], p[f"{blk}.b1"]))
    return tn.linear(h, p[f"{blk}.w2"], p[f"{blk}.b2"])


def conv_module(x, p):
    """Pointwise+GLU, depthwise conv over time, norm, swish, pointwise. ``x`` is [...,T,D]."""
    h = tn.glu(tn.linear(_ln(x, p, "conv.ln"), p["conv.pw1.w"], p["conv.pw1.b"]))
    h = tn.depthwise_conv1d(h, p["conv.dw.w"], p["conv.dw.b"])
    h = tn.swish(_ln(h, p, "conv.norm"))
    return tn.linear(h, p["conv.pw2.w"], p["conv.pw2.b"])


def encoder_layer(x, p, cfg, return_trace=False):
    """One multi-channel Conformer layer on ``x`` [...,C,T,D]."""
    x = tn.as_tensor(x)
    x = x + 0.5 * _ffn(x, p, "ffn1")
    a, trace = att.VARIANTS[p.attention](_ln(x, p, "mfcca.ln"), p.attn("mfcca"), cfg)
    x = x + a
    m, _ = att.single_channel_attention(_ln(x, p, "mhsa.ln"), p.attn("mhsa"))
    x = x + m
    x = x + conv_module(x, p)
    x = x + 0.5 * _ffn(x, p, "ffn2")
    out = _ln(x, p, "final")
    return (out, trace) if return_trace else out


def sinusoidal_encoding(length, dim):
    pos = np.arange(length)[:, None]
    rates = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return pe


def encoder_stack(x, embed_w, embed_b, layers, cfg, positional=True, return_traces=False):
    """Embed ``x`` [...,C,T,D_in], add positional encoding, run ``layers``.

    The positional table is shared by all channels.
    """
    if not layers:
        raise ContractError("encoder stack needs at least one layer")
    h = tn.linear(x, embed_w, embed_b)
    if positional:
        h = h + sinusoidal_encoding(h.shape[-2], h.shape[-1])
    traces = []
    for layer in layers:
        if return_traces:
            h, tr = encoder_layer(h, layer, cfg, return_trace=True)
            traces.append(tr)
        else:
            h = encoder_layer(h, layer, cfg)
    return (h, traces) if return_traces else h


def expansion_indices(channels, target):
    if not 1 <= channels <= target:
        raise ContractError(f"cannot expand {channels} channels to {target}")
    return [j % channels for j in range(target)]


def expand_channels(x, target):
    """Repeat channels cyclically up to ``target``: output j is input j mod C."""
    x = tn.as_tensor(x)
    C = x.shape[-3]
    idx = expansion_indices(C, target)
    if C == target:
        return x
    lead = (slice(None),) * (x.ndim - 3)
    return tn.concat([x[lead + (slice(j, j + 1),)] for j in idx], axis=-3)


def conv_fusion(x, fp):
    """Collapse [...,C*,T,D] to [...,T,D] with five 3x3 conv layers."""
    x = tn.as_tensor(x)
    if x.ndim not in (3, 4) or x.shape[-3] != fp.channels:
        raise DimensionError(f"fusion expects [..., {fp.channels}, T, D], got {x.shape}")
    h = x
    for i, (w, b) in enumerate(zip(fp.kernels, fp.biases)):
        h = tn.conv2d(h, w, b)
        if i < 4:
            h = tn.swish(h)
    return h.reshape(h.shape[:-3] + h.shape[-2:])
