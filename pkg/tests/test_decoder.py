import itertools
import math

import numpy as np
import pytest

import oracles
from qtseg.blocks import MLP, ConfigError
from qtseg.config import ModelConfig
from qtseg.data import stack, synth_dataset
from qtseg.decoder import MQMDecoder, QMDecoder, TwoWayBlock, positional_embedding, predict_mask, qm_decode
from qtseg.encoder import PyramidFeatures
from qtseg.gradcheck import gradcheck
from qtseg.losses import segmentation_loss
from qtseg.model import QTSeg
from qtseg.tensor import ShapeError, Tensor, no_grad, precision


# ---------------------------------------------------------------------------
# positional embedding

def test_pe_deterministic():
    a = positional_embedding(6, 7, 32)
    b = positional_embedding(6, 7, 32)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (32, 6, 7)


@pytest.mark.parametrize("dim", [4, 16, 64, 256])
def test_pe_norm(dim):
    pe = positional_embedding(9, 5, dim, np.float64)
    np.testing.assert_allclose(np.linalg.norm(pe, axis=0), math.sqrt(dim / 2), atol=1e-4)


def test_pe_distinct_positions():
    pe = positional_embedding(8, 8, 64, np.float64).reshape(64, -1).T
    for i, j in itertools.combinations(range(64), 2):
        assert np.abs(pe[i] - pe[j]).max() > 1e-6


def test_pe_dim_must_divide_by_four():
    with pytest.raises(ConfigError):
        positional_embedding(4, 4, 30)


# ---------------------------------------------------------------------------
# QM decoder pipeline

def test_qm_decode_shapes(rng):
    qm = QMDecoder(64, 8, 1, 128, rng)
    q = Tensor(rng.normal(size=(1, 2, 64)))
    s = Tensor(rng.normal(size=(1, 64, 8, 8)))
    q2, s2 = qm_decode(q, s, positional_embedding(8, 8, 64), qm)
    assert q2.shape == (1, 2, 64)
    assert s2.shape == (1, 64, 8, 8)
    with pytest.raises(ShapeError):
        qm_decode(q, s, positional_embedding(4, 4, 64), qm)


def test_extra_block_adds_one_two_way_block():
    a = QMDecoder(32, 8, 1, 64, np.random.default_rng(0), 2).num_parameters()
    b = QMDecoder(32, 8, 2, 64, np.random.default_rng(0), 2).num_parameters()
    block = TwoWayBlock(32, 8, 64, np.random.default_rng(0), 2).num_parameters()
    assert b - a == block


def _attn(a, q, k, v):
    return oracles.attention(q, k, v, a.q_proj.weight.data, a.q_proj.bias.data, a.k_proj.weight.data,
                             a.k_proj.bias.data, a.v_proj.weight.data, a.v_proj.bias.data,
                             a.out_proj.weight.data, a.out_proj.bias.data, a.heads)


def _ln(norm, x):
    return oracles.layer_norm(x, norm.weight.data, norm.bias.data)


def _mlp(m, x):
    l0, l1 = m.layers
    return oracles.linear(oracles.gelu(oracles.linear(x, l0.weight.data, l0.bias.data)), l1.weight.data,
                          l1.bias.data)


def unrolled_qm_h1(qm, Q, S, FE):
    """Straight-line transcription of the pipeline with one hidden block.

    Q is [N, F] (tokens as rows), S is [F, H, W], FE is [F, H, W].
    """
    blk = qm.blocks[0]
    f, h, w = S.shape
    query = Q
    key = (S + FE).reshape(f, h * w).T
    value = S.reshape(f, h * w).T
    # t = 0: image features to tokens
    q = _ln(blk.norm1, _attn(blk.self_attn, query, query, query))
    query = q + query
    attn_out = _attn(blk.cross_t2i, query, key, value)
    query = _ln(blk.norm2, query + attn_out)
    query = _ln(blk.norm3, _mlp(blk.mlp, query) + query)
    # tokens to image features
    attn_out = _attn(blk.cross_i2t, key, query, query)
    key = _ln(blk.norm4, key + attn_out)
    # final attention
    q = query + Q
    attn_out = _attn(qm.final_attn, q, key, value)
    Q_out = _ln(qm.norm_final, query + attn_out)
    S_out = key.T.reshape(f, h, w)
    return Q_out, S_out


@pytest.mark.parametrize("downsample", [1, 2])
def test_qm_decode_matches_unrolled_oracle(downsample):
    rng = np.random.default_rng(5)
    qm = QMDecoder(32, 8, 1, 64, rng, downsample)
    for mod in qm.parameters():
        if mod.data.ndim == 1:  # biases and norm params away from their init
            mod.data += rng.normal(scale=0.1, size=mod.shape)
    Q = rng.normal(size=(3, 32)).astype(np.float32)
    S = rng.normal(size=(32, 4, 5)).astype(np.float32)
    FE = positional_embedding(4, 5, 32)
    q_out, s_out = qm(Tensor(Q[None]), Tensor(S[None]), FE)
    q_ref, s_ref = unrolled_qm_h1(qm, Q, S, FE)
    assert np.abs(q_out.data[0] - q_ref).max() < 1e-4
    assert np.abs(s_out.data[0] - s_ref).max() < 1e-4


# ---------------------------------------------------------------------------
# pyramid decoding

def test_decode_pyramid_full_size():
    cfg = ModelConfig(num_classes=2)
    dec = MQMDecoder(cfg, np.random.default_rng(0))
    sf = PyramidFeatures(*(Tensor(np.zeros((1, c, s, s))) for c, s in [(64, 64), (128, 32), (256, 16)]))
    with no_grad():
        feats, tokens = dec(sf)
    assert feats.shape == (1, 64, 256, 256)
    assert tokens.shape == (1, 2, 64)
    assert dec.query_tokens.shape == (256, 2)
    assert dec.up2.c_out == 128 and dec.up1.c_out == 64
    assert (dec.up0_0.c_out, dec.up0_1.c_out) == (32, 64)


def test_concat_adds_projection_params():
    add = QTSeg(ModelConfig(n=4, input_size=64))
    cat = QTSeg(ModelConfig(n=4, input_size=64, aggregation="concat"))
    proj = cat.decoder.proj1.num_parameters() + cat.decoder.proj0.num_parameters()
    assert cat.num_parameters() - add.num_parameters() == proj > 0


def test_debug_intermediates(rng):
    cfg = ModelConfig(n=4, input_size=64)
    dec = MQMDecoder(cfg, rng)
    sf = PyramidFeatures(*(Tensor(rng.normal(size=(1, c, s, s))) for c, s in [(16, 8), (32, 4), (64, 2)]))
    feats, tokens, inter = dec(sf, debug=True)
    (t1, f1), (t0, f0) = inter
    assert t1.shape == (1, 1, 32) and f1.shape == (1, 32, 4, 4)
    assert t0.shape == (1, 1, 16) and f0.shape == (1, 16, 8, 8)


# ---------------------------------------------------------------------------
# mask head

def test_predict_mask_one_hot_selects_channel(rng):
    feats = rng.normal(size=(1, 4, 6, 6)).astype(np.float32)
    tokens = np.zeros((1, 1, 4), dtype=np.float32)
    tokens[0, 0, 2] = 1.0
    out = predict_mask(Tensor(feats), Tensor(tokens), None, (12, 12)).data
    np.testing.assert_allclose(out[0, 0], oracles.bilinear_resize(feats[0, 2:3], 12, 12)[0], atol=1e-5)


def test_predict_mask_per_pixel_oracle(rng):
    feats = rng.normal(size=(1, 4, 6, 6)).astype(np.float32)
    tokens = rng.normal(size=(1, 3, 4)).astype(np.float32)
    hyper = MLP([4, 8, 4], rng, act="gelu")
    out = predict_mask(Tensor(feats), Tensor(tokens), hyper, (12, 12)).data[0]
    weights = _mlp(hyper, tokens[0])
    ref = oracles.bilinear_resize(oracles.dot_product_mask(feats[0], weights), 12, 12)
    assert out.shape == (3, 12, 12)
    assert np.abs(out - ref).max() < 1e-5


def test_predict_mask_dim_mismatch(rng):
    with pytest.raises(ShapeError):
        predict_mask(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 1, 5))), None, (4, 4))


def test_zero_tokens_give_bias_only_mask(rng):
    feats = rng.normal(size=(1, 4, 5, 5)).astype(np.float32)
    hyper = MLP([4, 8, 4], rng, act="gelu")
    for layer in hyper.layers:
        layer.bias.data[:] = rng.normal(size=layer.bias.shape)
    zeros = np.zeros((1, 2, 4), dtype=np.float32)
    out = predict_mask(Tensor(feats), Tensor(zeros), hyper, (5, 5)).data[0]
    l0, l1 = hyper.layers
    bias_path = oracles.linear(oracles.gelu(l0.bias.data[None]), l1.weight.data, l1.bias.data)[0]
    ref = np.einsum("c,chw->hw", bias_path, feats[0])
    np.testing.assert_allclose(out, np.broadcast_to(ref, out.shape), atol=1e-5)


def test_token_perturbation_is_local(rng):
    feats = rng.normal(size=(1, 4, 5, 5)).astype(np.float32)
    tokens = rng.normal(size=(1, 3, 4)).astype(np.float32)
    base = predict_mask(Tensor(feats), Tensor(tokens), None, (10, 10)).data
    bumped = tokens.copy()
    bumped[0, 1, 2] += 0.5
    out = predict_mask(Tensor(feats), Tensor(bumped), None, (10, 10)).data
    changed = np.abs(out - base).reshape(3, -1).max(axis=1)
    assert changed[1] > 0 and changed[0] == 0 and changed[2] == 0


# ---------------------------------------------------------------------------
# end to end

@pytest.mark.parametrize("size", [64, 96, 128])
@pytest.mark.parametrize("classes", [1, 3])
def test_end_to_end_shapes(size, classes):
    model = QTSeg(ModelConfig(n=4, num_classes=classes, input_size=64)).eval()
    with no_grad():
        out = model(Tensor(np.zeros((3, size, size))))
    assert out.shape == (classes, size, size)


def test_full_forward_deterministic(rng):
    x = rng.uniform(size=(2, 3, 64, 64))
    a = QTSeg(ModelConfig(n=4, input_size=64))(Tensor(x)).data
    b = QTSeg(ModelConfig(n=4, input_size=64))(Tensor(x)).data
    np.testing.assert_array_equal(a, b)


def test_full_model_gradcheck():
    with precision(np.float64):
        model = QTSeg(ModelConfig(n=4, input_size=64, num_classes=1))
        x, y = stack(synth_dataset(2, 64, 1, seed=3))
        xt = Tensor(x)
        res = gradcheck(lambda: segmentation_loss(model(xt), y), model.parameters(), 50,
                        delta=1e-3, skip_kinks=True)
    assert res.passed(1e-2), (res.max_rel_error, res.worst)
    assert len(res.records) == 50
