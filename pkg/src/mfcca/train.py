"""Training and evaluation loops for the desk-scale model."""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .decoder import greedy_decode, sot_loss, token_accuracy
from .errors import ContractError
from .masking import MaskPolicy, apply_mask, sample_mask
from .sot import corpus_cer, serialize_sot
from .tensor import Rng


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 2e-3
    warmup_steps: int = 50
    batch_size: int = 16
    optimizer: str = "adam"
    smoothing: float = 0.0
    mask_prob: float = 0.0
    seed: int = 0
    clip: float = 5.0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("epochs >= 0, batch_size >= 1 and lr > 0 are required")


def targets_for(utts, vocab):
    """Teacher-forcing inputs and outputs, right-padded with <pad>."""
    seqs = [serialize_sot(u.sot, vocab) for u in utts]
    L = max(len(s) for s in seqs) - 1
    dec_in = np.full((len(seqs), L), vocab.pad_id, dtype=np.int64)
    dec_out = np.full((len(seqs), L), vocab.pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        dec_in[i, :len(s) - 1] = s[:-1]
        dec_out[i, :len(s) - 1] = s[1:]
    return dec_in, dec_out


def stack_features(utts, channels=None):
    feats = np.stack([u.features for u in utts])
    if channels is not None:
        if channels > feats.shape[1]:
            raise ContractError(f"requested {channels} channels but data has {feats.shape[1]}")
        feats = feats[:, :channels]
    return feats


def lr_at(step, cfg):
    """Linear warmup to ``cfg.lr`` over ``warmup_steps`` optimizer steps, then flat."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


class Optimizer:
    """Plain gradient descent or Adam over a dict of named arrays."""

    def __init__(self, cfg, names, state=None):
        self.cfg = cfg
        self.step = 0
        self.m, self.v = {}, {}
        if state:
            self.step = int(state["step"])
            for n in names:
                if f"m/{n}" in state:
                    self.m[n] = np.array(state[f"m/{n}"])
                    self.v[n] = np.array(state[f"v/{n}"])

    def state(self):
        out = {"step": np.array(self.step)}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def update(self, arrays, grads):
        lr = lr_at(self.step, self.cfg)
        if self.cfg.clip:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.cfg.clip:
                grads = {k: g * (self.cfg.clip / norm) for k, g in grads.items()}
        self.step += 1
        out = {}
        if self.cfg.optimizer == "sgd":
            for n, a in arrays.items():
                out[n] = a - lr * grads[n]
            return out
        b1, b2, eps = 0.9, 0.98, 1e-9
        for n, a in arrays.items():
            g = grads[n]
            m = self.m.get(n, np.zeros_like(a)) * b1 + (1 - b1) * g
            v = self.v.get(n, np.zeros_like(a)) * b2 + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            mhat = m / (1 - b1 ** self.step)
            vhat = v / (1 - b2 ** self.step)
            out[n] = a - lr * mhat / (np.sqrt(vhat) + eps)
        return out


def batch_loss(model, feats, dec_in, dec_out, smoothing):
    logits = model.logits(feats, dec_in)
    return sot_loss(logits, dec_out, smoothing), logits


def masked_features(feats, policy, seed, epoch, indices):
    if policy.p == 0:
        return feats
    out = np.array(feats, copy=True)
    for row, idx in enumerate(indices):
        plan = sample_mask(policy, feats.shape[1], Rng(seed, 2, epoch, int(idx)))
        out[row] = apply_mask(feats[row], plan)
    return out


def train_epoch(model, opt, utts, vocab, cfg, epoch):
    """One pass over ``utts``; returns (mean token loss, token accuracy)."""
    feats_all = stack_features(utts)
    dec_in_all, dec_out_all = targets_for(utts, vocab)
    order = Rng(cfg.seed, 1, epoch).permutation(len(utts))
    policy = MaskPolicy(cfg.mask_prob)
    total_loss = 0.0
    correct = counted = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        feats = masked_features(feats_all[idx], policy, cfg.seed, epoch, idx)
        dec_in, dec_out = dec_in_all[idx], dec_out_all[idx]
        # trim shared padding
        L = int((dec_out != vocab.pad_id).sum(axis=1).max())
        dec_in, dec_out = dec_in[:, :L], dec_out[:, :L]
        loss, logits = batch_loss(model, feats, dec_in, dec_out, cfg.smoothing)
        leaves = model.leaves()
        grads = tn.grad(loss, leaves)
        names = list(model.params)
        new = opt.update({n: model.params[n].data for n in names}, dict(zip(names, grads)))
        model.set_arrays(new)
        n_tok = int((dec_out != vocab.pad_id).sum())
        total_loss += float(loss.data) * n_tok
        c, k = token_accuracy(logits, dec_out, vocab.pad_id)
        correct += c
        counted += k
    return total_loss / counted, correct / counted


def decode_utterances(model, utts, vocab, channels=None, max_len=None, batch_size=32):
    """Greedy hypotheses (id lists without <sos>/<eos>) for each utterance."""
    hyps = []
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        feats = stack_features(chunk, channels)
        # per-utterance length cap so results do not depend on batch composition
        limits = [max_len or len(serialize_sot(u.sot, vocab)) + 8 for u in chunk]
        with tn.no_grad():
            memory = model.encode(feats)
        out = greedy_decode(memory, model.decoder(), max(limits), vocab.sos_id, vocab.eos_id)
        hyps.extend(h[:n] for h, n in zip(out, limits))
    return hyps


def evaluate_cer(model, utts, vocab, channels=None, keep_sc=False, per_speaker=False):
    hyps = decode_utterances(model, utts, vocab, channels)
    refs = [serialize_sot(u.sot, vocab, wrap=False) for u in utts]
    return corpus_cer(zip(refs, hyps), vocab.sc_id, keep_sc, per_speaker)
