"""End-to-end multi-channel AED model: encoder stack, fusion, decoder."""

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as tn
from .attention import ContextConfig
from .decoder import DecoderParams, decoder_forward, decoder_shapes
from .encoder import (
    EncoderLayerParams, FusionParams, conv_fusion, encoder_layer_shapes,
    encoder_stack, expand_channels, fusion_shapes,
)
from .errors import ContractError
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    model_dim: int = 32
    heads: int = 2
    ffn_dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 1
    conv_kernel: int = 7
    context: int = 2
    fusion_channels: int = 8
    fusion_kernel: int = 3
    vocab_size: int = 24
    attention: str = "mfcca"
    positional: bool = True

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ContractError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ContractError("encoder and decoder need at least one layer")
        if self.attention not in ("mfcca", "clcca", "flcca"):
            raise ContractError(f"unknown attention variant {self.attention!r}")

    def context_config(self):
        return ContextConfig(self.context)


PRESETS = {
    "desk": ModelConfig(),
    # 80-dim fbank, 11 encoder / 6 decoder layers, 4-head 256-dim MHSA,
    # 2048-dim FFN, 4950 characters plus the four specials.
    "paper": ModelConfig(input_dim=80, model_dim=256, heads=4, ffn_dim=2048, enc_layers=11,
                         dec_layers=6, conv_kernel=15, context=2, fusion_channels=8,
                         vocab_size=4954),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def param_shapes(cfg):
    shapes = {"enc.embed.w": (cfg.input_dim, cfg.model_dim), "enc.embed.b": (cfg.model_dim,)}
    for i in range(cfg.enc_layers):
        for k, v in encoder_layer_shapes(cfg.model_dim, cfg.ffn_dim, cfg.conv_kernel).items():
            shapes[f"enc.layers.{i}.{k}"] = v
    for k, v in fusion_shapes(cfg.fusion_channels, cfg.fusion_kernel).items():
        shapes[f"fusion.{k}"] = v
    for k, v in decoder_shapes(cfg.model_dim, cfg.ffn_dim, cfg.vocab_size, cfg.dec_layers).items():
        shapes[f"dec.{k}"] = v
    return shapes


def count_params(shapes):
    return int(sum(int(np.prod(s)) for s in shapes.values()))


def fusion_param_count(cfg):
    return count_params({k: v for k, v in param_shapes(cfg).items() if k.startswith("fusion.")})


def _init_array(name, shape, rng):
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b"):
        return np.zeros(shape)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        fan_out = shape[0] * shape[2] * shape[3]
    elif name.endswith("dw.w"):
        fan_in = fan_out = shape[1]
    elif name.endswith("embed") and name.startswith("dec"):
        return rng.normal(0.0, 1.0, size=shape)
    else:
        fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg, seed):
    rng = Rng(seed, 1)
    return {name: _init_array(name, shape, rng) for name, shape in param_shapes(cfg).items()}


class Model:
    """Parameter store plus forward passes. Arrays are wrapped as tracked tensors."""

    def __init__(self, cfg, arrays):
        shapes = param_shapes(cfg)
        missing = set(shapes) - set(arrays)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)[:5]}")
        for k, s in shapes.items():
            if tuple(np.shape(arrays[k])) != tuple(s):
                raise ContractError(f"parameter {k} has shape {np.shape(arrays[k])}, expected {s}")
        self.cfg = cfg
        self.params = {k: Tensor(arrays[k], requires_grad=True) for k in shapes}

    @classmethod
    def initialize(cls, cfg, seed):
        return cls(cfg, init_params(cfg, seed))

    def arrays(self):
        return {k: np.array(t.data) for k, t in self.params.items()}

    def set_arrays(self, arrays):
        self.params = {k: Tensor(arrays[k], requires_grad=True) for k in self.params}

    def leaves(self):
        return list(self.params.values())

    def _sub(self, prefix):
        n = len(prefix)
        return {k[n:]: t for k, t in self.params.items() if k.startswith(prefix)}

    def encoder_layers(self):
        return [
            EncoderLayerParams(self._sub(f"enc.layers.{i}."), self.cfg.heads, self.cfg.attention)
            for i in range(self.cfg.enc_layers)
        ]

    def fusion(self):
        p = self._sub("fusion.")
        return FusionParams(self.cfg.fusion_channels, [p[f"{i}.w"] for i in range(5)],
                            [p[f"{i}.b"] for i in range(5)])

    def decoder(self):
        return DecoderParams(self._sub("dec."), self.cfg.heads, self.cfg.dec_layers)

    def encode(self, features, return_traces=False):
        """[..., C, T, D_in] features -> [..., T, D] fused memory."""
        x = tn.as_tensor(features)
        out = encoder_stack(x, self.params["enc.embed.w"], self.params["enc.embed.b"],
                            self.encoder_layers(), self.cfg.context_config(),
                            positional=self.cfg.positional, return_traces=return_traces)
        h, traces = out if return_traces else (out, None)
        memory = conv_fusion(expand_channels(h, self.cfg.fusion_channels), self.fusion())
        return (memory, traces) if return_traces else memory

    def logits(self, features, dec_in):
        return decoder_forward(self.encode(features), dec_in, self.decoder())

    def first_layer_trace(self, features):
        """MFCCA weights of the first encoder layer for ``features`` [C,T,D_in]."""
        with tn.no_grad():
            x = tn.as_tensor(features)
            layers = self.encoder_layers()[:1]
            _, traces = encoder_stack(x, self.params["enc.embed.w"], self.params["enc.embed.b"],
                                      layers, self.cfg.context_config(),
                                      positional=self.cfg.positional, return_traces=True)
        return traces[0]


def diagnostic_model(cfg):
    """Model whose first-layer cross-channel attention is a pure dot-product probe.

    Embedding is the identity (requires input_dim == model_dim), positional
    encoding is off, the first half-FFN branch is silenced, and the first
    layer's attention uses one head with identity query/key projections and
    zero biases. Attention scores are then dot products of layer-normed
    input frames.
    """
    if cfg.input_dim != cfg.model_dim:
        raise ContractError("diagnostic model needs input_dim == model_dim")
    cfg = replace(cfg, heads=1, positional=False)
    arrays = init_params(cfg, 0)
    D = cfg.model_dim
    arrays["enc.embed.w"] = np.eye(D)
    arrays["enc.embed.b"] = np.zeros(D)
    arrays["enc.layers.0.ffn1.w2"] = np.zeros((cfg.ffn_dim, D))
    arrays["enc.layers.0.ffn1.b2"] = np.zeros(D)
    for n in ("wq", "wk"):
        arrays[f"enc.layers.0.mfcca.{n}"] = np.eye(D)
    for n in ("bq", "bk"):
        arrays[f"enc.layers.0.mfcca.{n}"] = np.zeros(D)
    return Model(cfg, arrays)


def save_checkpoint(path, model, extra=None, state=None):
    """Write parameters (with shapes), config, JSON ``extra`` and array ``state``."""
    payload = {f"param/{k}": v for k, v in model.arrays().items()}
    payload.update({f"state/{k}": v for k, v in (state or {}).items()})
    meta = {"config": asdict(model.cfg), "extra": extra or {}}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Returns (model, extra, state)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        state = {k[6:]: z[k] for k in z.files if k.startswith("state/")}
    cfg = ModelConfig(**meta["config"])
    return Model(cfg, params), meta["extra"], state
