"""Analytic-vs-central-difference gradient checks for every differentiable piece.

Each target builds a small random problem, reduces its output to a scalar
with a fixed random projection, and compares the tape gradient of every
input against :func:`mfcca.tensor.finite_difference`. The error for a
target is ``max |analytic - numeric| / max(1, |numeric|)`` over all
coordinates of all inputs.
"""

import json
import time

import numpy as np

from . import attention as att
from . import decoder as dec
from . import encoder as enc
from . import tensor as tn
from .tensor import Rng, Tensor

TOLERANCE = 1e-4


def check(fn, arrays, seed=0, eps=1e-4):
    """Return (max relative error, coordinates checked) for ``fn(*tensors)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with tn.no_grad():
        shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = Rng(seed, 404).standard_normal(shape)

    def scalar(tensors):
        return tn.tsum(tn.mul(fn(*tensors), proj))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = tn.grad(scalar(leaves), leaves)
    worst, coords = 0.0, 0
    for i, a in enumerate(arrays):
        def f(v, i=i):
            with tn.no_grad():
                ts = [Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]
                return float(scalar(ts).data)

        num = tn.finite_difference(f, a, eps)
        err = np.abs(analytic[i] - num) / np.maximum(1.0, np.abs(num))
        worst = max(worst, float(err.max()) if err.size else 0.0)
        coords += a.size
    return worst, coords


def _attn_arrays(rng, D):
    return [rng.standard_normal((D, D)) * 0.5 if n.startswith("w") else rng.standard_normal(D) * 0.1
            for n in att.AttentionParams.NAMES]


def _attn(heads, arrs):
    return att.AttentionParams(heads, *arrs)


def _named(shapes_fn, rng, **kw):
    shapes = shapes_fn(**kw)
    names = list(shapes)
    arrays = []
    for n in names:
        leaf = n.rsplit(".", 1)[-1]
        scale = 0.1 if leaf.startswith("b") else 0.5
        base = 1.0 if leaf == "g" else 0.0
        arrays.append(base + scale * rng.standard_normal(shapes[n]))
    return names, arrays


def _targets():
    rng = Rng(2024)
    r = rng.standard_normal
    T = {}

    T["add"] = (lambda a, b: a + b, [r((3, 4)), r((4,))])
    T["sub"] = (lambda a, b: a - b, [r((2, 3)), r((2, 1))])
    T["mul"] = (lambda a, b: a * b, [r((2, 3)), r((1, 3))])
    T["div"] = (lambda a, b: tn.div(a, b), [r((2, 3)), 1.5 + rng.random((2, 3))])
    T["exp"] = (tn.exp, [r((3, 2))])
    T["log"] = (tn.log, [0.5 + rng.random((3, 2))])
    T["sigmoid"] = (tn.sigmoid, [r((4, 3)) * 3])
    T["swish"] = (tn.swish, [r((4, 3)) * 3])
    T["glu"] = (tn.glu, [r((3, 6))])
    T["sum"] = (lambda a: a.sum(axis=1), [r((2, 3, 4))])
    T["mean"] = (lambda a: a.mean(axis=-1, keepdims=True), [r((2, 5))])
    T["reshape"] = (lambda a: a.reshape(6, 2) * np.arange(12.0).reshape(6, 2), [r((3, 4))])
    T["permute"] = (lambda a: a.permute(2, 0, 1) * np.arange(24.0).reshape(4, 2, 3), [r((2, 3, 4))])
    T["getitem"] = (lambda a: a[1:, ::2], [r((3, 5))])
    T["concat"] = (lambda a, b: tn.concat([a, b], axis=1), [r((2, 3)), r((2, 2))])
    T["zero_pad"] = (lambda a: tn.zero_pad(a, 0, 1, 2), [r((3, 2))])
    ids = np.array([[0, 2, 2], [3, 1, 0]])
    T["embedding"] = (lambda t: tn.embedding(t, ids), [r((4, 3))])
    T["matmul"] = (tn.matmul, [r((2, 3, 4)), r((4, 2))])
    T["softmax"] = (tn.softmax_lastdim, [r((3, 5)) * 2])
    causal = np.tril(np.ones((4, 4), dtype=bool))
    T["softmax_masked"] = (lambda a: tn.softmax_lastdim(a, causal), [r((2, 4, 4))])
    T["log_softmax"] = (tn.log_softmax_lastdim, [r((3, 5)) * 2])
    T["layer_norm"] = (tn.layer_norm, [r((3, 5)), 1 + 0.3 * r(5), 0.3 * r(5)])
    T["conv2d"] = (tn.conv2d, [r((2, 3, 5, 4)), r((2, 3, 3, 3)), r(2)])
    T["depthwise_conv1d"] = (tn.depthwise_conv1d, [r((2, 6, 3)), r((3, 3)), r(3)])

    C, Tt, D, h = 3, 4, 4, 2
    x = r((C, Tt, D))
    T["leave_one_out_mean"] = (att.leave_one_out_mean, [x])
    T["stack_context"] = (lambda a: att.stack_context(a, att.ContextConfig(1)), [x])
    pa = _attn_arrays(rng, D)
    T["single_channel_attention"] = (
        lambda a, *p: att.single_channel_attention(a, _attn(h, p))[0], [x[0], *pa])
    T["flcca"] = (lambda a, *p: att.flcca(a, _attn(h, p))[0], [x, *pa])
    T["clcca"] = (lambda a, *p: att.clcca(a, _attn(h, p))[0], [x, *pa])
    T["mfcca"] = (lambda a, *p: att.mfcca(a, _attn(h, p), att.ContextConfig(1))[0], [x, *pa])

    names, arrays = _named(enc.encoder_layer_shapes, rng, model_dim=D, ffn_dim=6, conv_kernel=3)
    ccfg = att.ContextConfig(1)

    def layer(a, *vals):
        p = enc.EncoderLayerParams(dict(zip(names, vals)), h)
        return enc.encoder_layer(a, p, ccfg)

    T["encoder_layer"] = (layer, [x, *arrays])

    xin = r((2, Tt, 3))
    ew, eb = r((3, D)) * 0.5, r(D) * 0.1

    def stack(a, w, b, *vals):
        p = enc.EncoderLayerParams(dict(zip(names, vals)), h)
        return enc.encoder_stack(a, w, b, [p], ccfg)

    T["encoder_stack"] = (stack, [xin, ew, eb, *arrays])

    fnames, farrays = _named(enc.fusion_shapes, rng, channels=4)

    def fusion(a, *vals):
        p = dict(zip(fnames, vals))
        fp = enc.FusionParams(4, [p[f"{i}.w"] for i in range(5)], [p[f"{i}.b"] for i in range(5)])
        return enc.conv_fusion(enc.expand_channels(a, 4), fp)

    T["conv_fusion"] = (fusion, [r((3, 5, 4)), *farrays])

    def stack_fusion(a, w, b, *vals):
        lv, fv = vals[:len(names)], vals[len(names):]
        p = enc.EncoderLayerParams(dict(zip(names, lv)), h)
        fpd = dict(zip(fnames, fv))
        fp = enc.FusionParams(4, [fpd[f"{i}.w"] for i in range(5)], [fpd[f"{i}.b"] for i in range(5)])
        return enc.conv_fusion(enc.expand_channels(enc.encoder_stack(a, w, b, [p], ccfg), 4), fp)

    T["encoder_stack+conv_fusion"] = (stack_fusion, [xin, ew, eb, *arrays, *farrays])

    V = 6
    dnames, darrays = _named(dec.decoder_shapes, rng, model_dim=D, ffn_dim=6, vocab_size=V, layers=1)
    dec_ids = np.array([[1, 4, 3, 5], [1, 5, 2, 0]])

    def decoder(mem, *vals):
        return dec.decoder_forward(mem, dec_ids, dec.DecoderParams(dict(zip(dnames, vals)), h, 1))

    T["decoder"] = (decoder, [r((2, 5, D)), *darrays])
    tgt = np.array([[4, 3, 5, 2], [5, 2, 0, 0]])
    T["sot_loss"] = (lambda lg: dec.sot_loss(lg, tgt, 0.0), [r((2, 4, V))])
    T["sot_loss_smoothed"] = (lambda lg: dec.sot_loss(lg, tgt, 0.1), [r((2, 4, V))])
    return T


TARGETS = tuple(_targets())


def run(names=None, tolerance=TOLERANCE):
    """Yield one result dict per target."""
    targets = _targets()
    for name in names or targets:
        fn, arrays = targets[name]
        t0 = time.perf_counter()
        err, coords = check(fn, arrays)
        yield {
            "target": name,
            "max_rel_err": err,
            "tolerance": tolerance,
            "coords": coords,
            "passed": bool(err <= tolerance),
            "seconds": round(time.perf_counter() - t0, 4),
        }


def write_report(path, results):
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(json.dumps(res, sort_keys=True) + "\n")
