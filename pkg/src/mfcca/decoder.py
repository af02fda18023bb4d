"""Transformer attention decoder, label-smoothed loss and greedy search."""

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import tensor as tn
from .encoder import sinusoidal_encoding
from .errors import ContractError, DimensionError


def decoder_shapes(model_dim, ffn_dim, vocab_size, layers):
    D = model_dim
    shapes = {"embed": (vocab_size, D)}
    for i in range(layers):
        pre = f"layers.{i}"
        for blk in ("self", "cross"):
            shapes[f"{pre}.{blk}.ln.g"] = (D,)
            shapes[f"{pre}.{blk}.ln.b"] = (D,)
            for n in att.AttentionParams.NAMES:
                shapes[f"{pre}.{blk}.{n}"] = (D, D) if n.startswith("w") else (D,)
        shapes.update({
            f"{pre}.ffn.ln.g": (D,), f"{pre}.ffn.ln.b": (D,),
            f"{pre}.ffn.w1": (D, ffn_dim), f"{pre}.ffn.b1": (ffn_dim,),
            f"{pre}.ffn.w2": (ffn_dim, D), f"{pre}.ffn.b2": (D,),
        })
    shapes.update({"final.g": (D,), "final.b": (D,), "out.w": (D, vocab_size), "out.b": (vocab_size,)})
    return shapes


@dataclass
class DecoderParams:
    tensors: dict
    heads: int
    layers: int

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def vocab_size(self):
        return self.tensors["out.w"].shape[1]

    def attn(self, prefix):
        t = self.tensors
        return att.AttentionParams(self.heads, *(t[f"{prefix}.{n}"] for n in att.AttentionParams.NAMES))


def _ln(x, p, name):
    return tn.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def decoder_forward(memory, ids, p):
    """Logits [..., L, V] for target prefixes ``ids`` [..., L] given
    encoder ``memory`` [..., T, D]."""
    memory = tn.as_tensor(memory)
    ids = np.asarray(ids, dtype=np.int64)
    D = p["embed"].shape[1]
    if memory.shape[-1] != D:
        raise DimensionError(f"memory {memory.shape} does not match decoder width {D}")
    if ids.ndim < 1 or ids.shape[-1] < 1:
        raise DimensionError(f"decoder needs at least one input token, got ids of shape {ids.shape}")
    L = ids.shape[-1]
    h = tn.embedding(p["embed"], ids) + sinusoidal_encoding(L, D)
    causal = np.tril(np.ones((L, L), dtype=bool))
    for i in range(p.layers):
        pre = f"layers.{i}"
        y = _ln(h, p, f"{pre}.self.ln")
        a, _ = att.multi_head_attention(y, y, p.attn(f"{pre}.self"), mask=causal)
        h = h + a
        c, _ = att.multi_head_attention(_ln(h, p, f"{pre}.cross.ln"), memory, p.attn(f"{pre}.cross"))
        h = h + c
        f = tn.swish(tn.linear(_ln(h, p, f"{pre}.ffn.ln"), p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"]))
        h = h + tn.linear(f, p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
    return tn.linear(_ln(h, p, "final"), p["out.w"], p["out.b"])


def sot_loss(logits, targets, smoothing=0.0, pad_id=0):
    """Label-smoothed cross-entropy averaged over non-pad target positions.

    The smoothed target puts 1 - eps on the reference token and eps/V on
    every token.
    """
    logits = tn.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    V = logits.shape[-1]
    keep = targets != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ContractError("loss needs at least one non-pad target")
    q = np.full(logits.shape, smoothing / V)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    q += (1.0 - smoothing) * onehot
    q *= keep[..., None]
    return tn.tsum(tn.log_softmax_lastdim(logits) * q) * (-1.0 / n)


def token_accuracy(logits, targets, pad_id=0):
    """(correct, counted) argmax hits over non-pad positions."""
    pred = np.asarray(tn.as_tensor(logits).data).argmax(axis=-1)
    targets = np.asarray(targets)
    keep = targets != pad_id
    return int((pred[keep] == targets[keep]).sum()), int(keep.sum())


def greedy_decode(memory, p, max_len, sos_id=1, eos_id=2):
    """Argmax decoding from <sos>; <eos> ends a hypothesis and is not returned.

    ``memory`` is [T,D] (returns one id list) or [B,T,D] (returns B lists).
    """
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    mem = tn.as_tensor(memory)
    single = mem.ndim == 2
    if single:
        mem = tn.Tensor(mem.data[None])
    B = mem.shape[0]
    ys = np.full((B, 1), sos_id, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    hyps = [[] for _ in range(B)]
    with tn.no_grad():
        for _ in range(max_len):
            logits = decoder_forward(mem, ys, p).data
            nxt = logits[:, -1, :].argmax(axis=-1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == eos_id:
                    done[b] = True
                else:
                    hyps[b].append(int(nxt[b]))
            if done.all():
                break
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
    return hyps[0] if single else hyps
