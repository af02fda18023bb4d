import numpy as np
import pytest

from helpers import as_np
from mfcca import encoder as enc
from mfcca import tensor as tn
from mfcca.attention import ContextConfig
from mfcca.errors import ContractError, DimensionError
from mfcca.model import PRESETS, ModelConfig, Model, count_params, fusion_param_count, param_shapes
from mfcca.tensor import Rng

TOL = 1e-12


def layer_params(rng, D=16, ffn=24, k=5, heads=2, attention="mfcca"):
    arrays = {}
    for name, shape in enc.encoder_layer_shapes(D, ffn, k).items():
        leaf = name.rsplit(".", 1)[-1]
        base = 1.0 if leaf == "g" else 0.0
        arrays[name] = base + (0.1 if leaf.startswith("b") else 0.3) * rng.standard_normal(shape)
    return enc.EncoderLayerParams(arrays, heads, attention), arrays


def fusion_params(rng, C=8, scale=0.3):
    shapes = enc.fusion_shapes(C)
    return enc.FusionParams(C, [scale * rng.standard_normal(shapes[f"{i}.w"]) for i in range(5)],
                            [0.1 * rng.standard_normal(shapes[f"{i}.b"]) for i in range(5)])


# --- encoder layer ----------------------------------------------------------------

def test_layer_shape(rng):
    p, _ = layer_params(rng)
    assert enc.encoder_layer(rng.standard_normal((4, 10, 16)), p, ContextConfig(2)).shape == (4, 10, 16)


@pytest.mark.parametrize("variant", ["mfcca", "clcca", "flcca"])
def test_layer_permutation_equivariance(variant):
    r = Rng(41)
    p, _ = layer_params(r, attention=variant)
    x = r.standard_normal((4, 6, 16))
    perm = r.permutation(4)
    a = as_np(enc.encoder_layer(x[perm], p, ContextConfig(1)))
    b = as_np(enc.encoder_layer(x, p, ContextConfig(1)))
    assert np.max(np.abs(a - b[perm])) <= TOL


def test_zeroed_residual_branches_leave_final_norm(rng):
    _, arrays = layer_params(rng)
    for name in enc.RESIDUAL_OUTPUTS:
        arrays[name] = np.zeros_like(arrays[name])
    p = enc.EncoderLayerParams(arrays, 2)
    x = rng.standard_normal((3, 5, 16))
    want = tn.layer_norm(x, arrays["final.g"], arrays["final.b"]).data
    assert np.max(np.abs(as_np(enc.encoder_layer(x, p, ContextConfig(2))) - want)) <= TOL


def test_each_residual_branch_is_shape_preserving(rng):
    _, arrays = layer_params(rng)
    x = rng.standard_normal((3, 5, 16))
    for name in enc.RESIDUAL_OUTPUTS:
        a = dict(arrays)
        a[name] = a[name] + rng.standard_normal(a[name].shape)
        assert enc.encoder_layer(x, enc.EncoderLayerParams(a, 2), ContextConfig(1)).shape == x.shape


def test_conv_module_acts_per_channel(rng):
    _, arrays = layer_params(rng)
    x = rng.standard_normal((2, 7, 16))
    y = as_np(enc.conv_module(x, arrays))
    y1 = as_np(enc.conv_module(x[1:], arrays))
    assert np.max(np.abs(y[1:] - y1)) <= TOL


# --- encoder stack ------------------------------------------------------------------

def test_stack_single_layer_is_embed_then_layer(rng):
    p, _ = layer_params(rng)
    w, b = rng.standard_normal((5, 16)) * 0.3, rng.standard_normal(16) * 0.1
    x = rng.standard_normal((3, 6, 5))
    emb = x @ w + b + enc.sinusoidal_encoding(6, 16)
    want = as_np(enc.encoder_layer(emb, p, ContextConfig(2)))
    got = as_np(enc.encoder_stack(x, w, b, [p], ContextConfig(2)))
    assert np.max(np.abs(got - want)) <= TOL


def test_stack_rejects_empty(rng):
    with pytest.raises(ContractError):
        enc.encoder_stack(np.zeros((2, 3, 4)), np.zeros((4, 4)), np.zeros(4), [], ContextConfig(1))


def test_stack_permutation_equivariance(rng):
    p, _ = layer_params(rng)
    q, _ = layer_params(rng)
    w, b = rng.standard_normal((5, 16)) * 0.3, rng.standard_normal(16) * 0.1
    x = rng.standard_normal((4, 6, 5))
    perm = np.array([2, 0, 3, 1])
    a = as_np(enc.encoder_stack(x[perm], w, b, [p, q], ContextConfig(2)))
    c = as_np(enc.encoder_stack(x, w, b, [p, q], ContextConfig(2)))
    assert np.max(np.abs(a - c[perm])) <= TOL


def test_presets():
    paper = PRESETS["paper"]
    assert (paper.enc_layers, paper.model_dim, paper.heads, paper.ffn_dim) == (11, 256, 4, 2048)
    assert paper.dec_layers == 6
    desk = PRESETS["desk"]
    assert (desk.enc_layers, desk.model_dim, desk.heads, desk.ffn_dim, desk.context) == (2, 32, 2, 64, 2)


def test_desk_model_finite_on_simulator_batch(small_corpus):
    from mfcca import sim
    out, cfg = small_corpus
    utts = sim.read_split(out / "train.jsonl")[:4]
    model = Model.initialize(ModelConfig(), 0)
    mem = as_np(model.encode(np.stack([u.features for u in utts])))
    assert mem.shape == (4, cfg.frames(), 32) and np.isfinite(mem).all()


# --- expansion / fusion -----------------------------------------------------------------

def test_expansion_indices():
    assert enc.expansion_indices(3, 8) == [0, 1, 2, 0, 1, 2, 0, 1]
    assert enc.expansion_indices(8, 8) == list(range(8))
    assert enc.expansion_indices(1, 8) == [0] * 8
    with pytest.raises(ContractError):
        enc.expansion_indices(9, 8)


def test_expand_channels_values(rng):
    x = rng.standard_normal((3, 4, 2))
    y = as_np(enc.expand_channels(x, 8))
    assert np.array_equal(y, x[[0, 1, 2, 0, 1, 2, 0, 1]])
    assert np.array_equal(as_np(enc.expand_channels(x, 3)), x)


def test_fusion_schedule():
    assert enc.fusion_schedule(8) == [4, 4, 2, 2, 1]


def test_fusion_output_shape(rng):
    fp = fusion_params(rng)
    for T, D in [(1, 1), (5, 3), (9, 16)]:
        assert enc.conv_fusion(rng.standard_normal((8, T, D)), fp).shape == (T, D)
    assert enc.conv_fusion(rng.standard_normal((2, 8, 5, 3)), fp).shape == (2, 5, 3)


def test_fusion_zero_in_zero_out(rng):
    fp = fusion_params(rng)
    fp = enc.FusionParams(8, fp.kernels, [np.zeros_like(b) for b in fp.biases])
    assert not as_np(enc.conv_fusion(np.zeros((8, 6, 5)), fp)).any()


def test_fusion_wrong_width(rng):
    with pytest.raises(DimensionError):
        enc.conv_fusion(np.zeros((4, 3, 3)), fusion_params(rng))


def test_fusion_needs_five_layers(rng):
    fp = fusion_params(rng)
    with pytest.raises(ContractError):
        enc.FusionParams(8, fp.kernels[:4], fp.biases[:4])


def test_duplicate_channel_invariance(rng):
    fp = fusion_params(rng)
    ch = rng.standard_normal((1, 6, 5))
    base = as_np(enc.conv_fusion(enc.expand_channels(ch, 8), fp))
    for C in (2, 3, 5):
        dup = np.repeat(ch, C, axis=0)
        assert np.max(np.abs(as_np(enc.conv_fusion(enc.expand_channels(dup, 8), fp)) - base)) <= TOL


def test_fusion_parameter_count():
    # weights 9 * (8*4 + 4*4 + 4*2 + 2*2 + 2*1) = 558, biases 4+4+2+2+1 = 13
    shapes = enc.fusion_shapes(8)
    assert count_params(shapes) == 571
    paper = PRESETS["paper"]
    assert fusion_param_count(paper) / count_params(param_shapes(paper)) < 1e-4
