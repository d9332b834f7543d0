import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from qtseg import functional as F
from qtseg import kernels
from qtseg.blocks import Attention
from qtseg.module import BatchNorm2d
from qtseg.tensor import GradTape, ShapeError, Tensor

TRIALS = 100
ATOL = 1e-5


def _trials(seed, n=TRIALS):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield rng


# ---------------------------------------------------------------------------
# conv2d

def test_conv_identity_kernel(backend):
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    y = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), 1)
    np.testing.assert_array_equal(y.data, x)


def test_conv_table_shape(backend):
    x = Tensor(np.zeros((3, 512, 512)))
    y = F.conv2d(x, Tensor(np.zeros((16, 3, 3, 3))), None, 2)
    assert y.shape == (16, 256, 256)


def test_conv_fixed_example_vs_oracle(backend, rng):
    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y = F.conv2d(Tensor(x), Tensor(w), Tensor(b), 1)
    np.testing.assert_allclose(y.data, oracles.conv2d(x, w, b, 1), atol=ATOL)


def test_conv_random_trials(backend):
    worst = 0.0
    for r in _trials(1):
        ci, co = r.integers(1, 4, size=2)
        h, w = r.integers(1, 9, size=2)
        k = int(r.integers(1, 5))
        s = int(r.integers(1, 4))
        pad = "same" if r.random() < 0.7 or k > min(h, w) else "valid"
        x = r.normal(size=(ci, h, w)).astype(np.float32)
        wt = r.normal(size=(co, ci, k, k)).astype(np.float32)
        b = r.normal(size=co).astype(np.float32)
        y = F.conv2d(Tensor(x), Tensor(wt), Tensor(b), s, pad)
        ref = oracles.conv2d(x, wt, b, s, pad)
        assert y.shape == ref.shape
        worst = max(worst, np.abs(y.data - ref).max())
    assert worst < ATOL


def test_conv_channel_mismatch(backend):
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_batched_matches_per_sample(backend, rng):
    x = rng.normal(size=(3, 2, 7, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    batched = F.conv2d(Tensor(x), Tensor(w), None, 2).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], F.conv2d(Tensor(x[i]), Tensor(w), None, 2).data)


# ---------------------------------------------------------------------------
# conv_transpose2d

def test_conv_transpose_constant_kernel(backend):
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    y = F.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), None, 2)
    expected = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    np.testing.assert_array_equal(y.data, expected)


def test_conv_transpose_table_shape(backend):
    y = F.conv_transpose2d(Tensor(np.zeros((2, 16, 16))), Tensor(np.zeros((2, 3, 4, 4))), None, 4)
    assert y.shape == (3, 64, 64)


def test_conv_transpose_random_trials(backend):
    worst = 0.0
    for r in _trials(2):
        ci, co = r.integers(1, 4, size=2)
        h, w = r.integers(1, 6, size=2)
        s = int(r.choice([1, 2, 4]))
        x = r.normal(size=(ci, h, w)).astype(np.float32)
        wt = r.normal(size=(ci, co, s, s)).astype(np.float32)
        b = r.normal(size=co).astype(np.float32)
        y = F.conv_transpose2d(Tensor(x), Tensor(wt), Tensor(b), s)
        worst = max(worst, np.abs(y.data - oracles.conv_transpose2d(x, wt, b, s)).max())
    assert worst < ATOL


def test_conv_transpose_requires_kernel_equal_stride(backend):
    with pytest.raises(ShapeError):
        F.conv_transpose2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), None, 2)


# ---------------------------------------------------------------------------
# maxpool

def test_maxpool_examples(backend):
    ramp = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    np.testing.assert_array_equal(F.maxpool2d(Tensor(ramp), 2, 2, False).data, [[[5, 7], [13, 15]]])
    const = np.full((2, 6, 6), 3.5)
    np.testing.assert_array_equal(F.maxpool2d(Tensor(const), 5, 1).data, const)
    assert F.maxpool2d(Tensor(np.zeros((1, 16, 16))), 5, 1).shape == (1, 16, 16)


def test_maxpool_random_trials(backend):
    worst = 0.0
    for r in _trials(3):
        c = int(r.integers(1, 4))
        h, w = r.integers(1, 9, size=2)
        k = int(r.integers(1, 6))
        s = int(r.integers(1, 4))
        same = bool(r.random() < 0.7) or k > min(h, w)
        x = r.normal(size=(c, h, w)).astype(np.float32)
        y = F.maxpool2d(Tensor(x), k, s, same)
        worst = max(worst, np.abs(y.data - oracles.maxpool2d(x, k, s, same)).max())
    assert worst < ATOL


def test_maxpool_grad_routes_to_argmax(backend):
    x = Tensor(np.array([[[1.0, 5.0], [3.0, 2.0]]]), requires_grad=True)
    with GradTape() as tape:
        loss = F.maxpool2d(x, 2, 2, False).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [[[0, 1], [0, 0]]])


def test_backends_agree_bitwise(rng):
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled backend not built")
    x = rng.normal(size=(2, 3, 11, 9)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    results = []
    for name in ("python", "cython"):
        kernels.use_backend(name)
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        with GradTape() as tape:
            y = F.maxpool2d(F.conv2d(xt, wt, None, 2), 3, 1)
            loss = (y * y).sum()
        tape.backward(loss)
        results.append((y.data, xt.grad, wt.grad))
    kernels.use_backend("cython")
    for a, b in zip(*results):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# shape algebra

@pytest.mark.parametrize("s", [1, 2, 4])
def test_shape_algebra_sweep(backend, s):
    for h in range(7, 65):
        x = Tensor(np.zeros((1, h, h + 1)))
        y = F.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), None, s)
        assert y.shape == (1, math.ceil(h / s), math.ceil((h + 1) / s))
        t = F.conv_transpose2d(x, Tensor(np.zeros((1, 1, s, s))), None, s)
        assert t.shape == (1, h * s, (h + 1) * s)


# ---------------------------------------------------------------------------
# resize

def test_resize_examples():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(F.resize(x, 1, "bilinear").data, x.data)
    np.testing.assert_array_equal(F.resize(x, 2, "nearest").data,
                                  [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_bilinear_reproduces_linear_ramp():
    ramp = np.add.outer(0.5 * np.arange(8), 0.25 * np.arange(8))
    up = F.resize(Tensor(ramp[None]), 2, "bilinear").data[0]
    # half-pixel sampling of a linear function is exact away from the clamped border
    yy = (np.arange(16) + 0.5) / 2 - 0.5
    expected = np.add.outer(0.5 * yy, 0.25 * yy)
    np.testing.assert_allclose(up[1:-1, 1:-1], expected[1:-1, 1:-1], atol=1e-5)


def test_bilinear_random_trials():
    worst = 0.0
    for r in _trials(4):
        c = int(r.integers(1, 3))
        h, w = r.integers(1, 8, size=2)
        ho, wo = r.integers(1, 9, size=2)
        x = r.normal(size=(c, h, w)).astype(np.float32)
        y = F.resize(Tensor(x), mode="bilinear", size=(int(ho), int(wo)))
        worst = max(worst, np.abs(y.data - oracles.bilinear_resize(x, ho, wo)).max())
    assert worst < ATOL


def test_resize_non_integral_size():
    with pytest.raises(ValueError):
        F.resize(Tensor(np.zeros((3, 3))), 0.5)


# ---------------------------------------------------------------------------
# matmul, softmax, norms, activations

def test_matmul_random_trials():
    from qtseg.tensor import matmul

    worst = 0.0
    for r in _trials(5):
        m, k, p = r.integers(1, 9, size=3)
        a = r.normal(size=(m, k)).astype(np.float32)
        b = r.normal(size=(k, p)).astype(np.float32)
        worst = max(worst, np.abs(matmul(Tensor(a), Tensor(b)).data - oracles.matmul(a, b)).max())
    a = np.random.default_rng(9).normal(size=(7, 9)).astype(np.float32)
    b = np.random.default_rng(10).normal(size=(9, 4)).astype(np.float32)
    worst = max(worst, np.abs(matmul(Tensor(a), Tensor(b)).data - oracles.matmul(a, b)).max())
    assert worst < ATOL


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax_rows(Tensor(np.full((2, 4), 7.0))).data, np.full((2, 4), 0.25))
    np.testing.assert_allclose(F.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-7)


def test_softmax_random_trials():
    worst = 0.0
    for r in _trials(6):
        x = r.normal(scale=3, size=tuple(r.integers(1, 9, size=2))).astype(np.float32)
        worst = max(worst, np.abs(F.softmax_rows(Tensor(x)).data - oracles.softmax_rows(x)).max())
    assert worst < ATOL


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 12)),
              elements=st.floats(-50, 50, width=32)))
def test_softmax_rows_sum_to_one(x):
    y = F.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    assert (y >= 0).all()


def test_layer_norm_examples(rng):
    d = 6
    g, b = Tensor(np.ones(d)), Tensor(np.zeros(d))
    np.testing.assert_array_equal(F.layer_norm(Tensor(np.zeros((1, d))), g, b).data, np.zeros((1, d)))
    y = F.layer_norm(Tensor(rng.normal(3, 2, size=(5, d))), g, b).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)


def test_layer_norm_random_trials():
    worst = 0.0
    for r in _trials(7):
        shape = tuple(r.integers(1, 6, size=2))
        x = r.normal(size=shape).astype(np.float32)
        g = r.normal(size=shape[-1]).astype(np.float32)
        b = r.normal(size=shape[-1]).astype(np.float32)
        y = F.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
        worst = max(worst, np.abs(y - oracles.layer_norm(x, g, b)).max())
    assert worst < ATOL


def test_batch_norm_two_sample_batch():
    x = np.array([[[[1.0, 2.0]], [[0.0, 4.0]]], [[[3.0, 6.0]], [[2.0, -2.0]]]])  # [2, 2, 1, 2]
    bn = BatchNorm2d(2)
    y = bn(Tensor(x)).data
    for c in range(2):
        vals = x[:, c].ravel()
        mu = vals.mean()
        var = ((vals - mu) ** 2).mean()
        np.testing.assert_allclose(y[:, c], (x[:, c] - mu) / np.sqrt(var + 1e-5), atol=1e-5)
        np.testing.assert_allclose(bn.running_mean[c], 0.1 * mu, rtol=1e-6)
        np.testing.assert_allclose(bn.running_var[c], 0.9 + 0.1 * vals.var(ddof=1), rtol=1e-6)


def test_batch_norm_random_trials():
    worst = 0.0
    for r in _trials(8):
        b, c, h, w = r.integers(1, 5, size=4)
        if b * h * w < 2:
            continue
        x = r.normal(size=(b, c, h, w)).astype(np.float32)
        g = r.normal(size=c).astype(np.float32)
        beta = r.normal(size=c).astype(np.float32)
        y = F.batch_norm(Tensor(x), Tensor(g), Tensor(beta), np.zeros(c), np.ones(c), True).data
        worst = max(worst, np.abs(y - oracles.batch_norm_train(x, g, beta)).max())
    assert worst < 1e-4


def test_batch_norm_eval_uses_running_stats():
    bn = BatchNorm2d(1).eval()
    bn.running_mean[:] = 2.0
    bn.running_var[:] = 4.0
    y = bn(Tensor(np.full((1, 1, 2, 2), 6.0))).data
    np.testing.assert_allclose(y, 4.0 / np.sqrt(4.0 + 1e-5), rtol=1e-6)


def test_activation_examples():
    assert F.silu(Tensor([0.0])).data[0] == 0
    assert F.gelu(Tensor([0.0])).data[0] == 0
    np.testing.assert_allclose(F.silu(Tensor([1.0])).data, [1 / (1 + math.exp(-1))], atol=1e-6)
    grid = np.linspace(-1, 20, 500)
    assert (np.diff(F.silu(Tensor(grid)).data) > 0).all()
    with pytest.raises(ValueError):
        F.activation(Tensor([0.0]), "tanh")


def test_activation_random_trials():
    worst = 0.0
    for r in _trials(9):
        x = r.normal(scale=3, size=int(r.integers(1, 9)))
        worst = max(worst, np.abs(F.silu(Tensor(x)).data - oracles.silu(x)).max(),
                    np.abs(F.gelu(Tensor(x)).data - oracles.gelu(x)).max(),
                    np.abs(F.relu(Tensor(x)).data - np.maximum(x, 0)).max())
    assert worst < ATOL


# ---------------------------------------------------------------------------
# attention

def _attn_oracle(attn, q, k, v):
    return oracles.attention(
        q, k, v, attn.q_proj.weight.data, attn.q_proj.bias.data, attn.k_proj.weight.data, attn.k_proj.bias.data,
        attn.v_proj.weight.data, attn.v_proj.bias.data, attn.out_proj.weight.data, attn.out_proj.bias.data,
        attn.heads)


def test_attention_eight_heads_vs_oracle():
    r = np.random.default_rng(11)
    attn = Attention(64, 8, r)
    for p in (attn.q_proj, attn.k_proj, attn.v_proj, attn.out_proj):
        p.bias.data[:] = r.normal(size=p.bias.shape)
    x = [r.normal(size=(4, 64)).astype(np.float32) for _ in range(3)]
    y = attn(*(Tensor(t) for t in x)).data
    assert np.abs(y - _attn_oracle(attn, *x)).max() < ATOL


def test_attention_random_trials():
    worst = 0.0
    for r in _trials(12):
        heads = int(r.choice([1, 2, 4]))
        ds = int(r.choice([1, 2]))
        dim = heads * ds * int(r.integers(1, 3))
        attn = Attention(dim, heads, r, ds)
        tq, tk = r.integers(1, 7, size=2)
        q = r.normal(size=(tq, dim)).astype(np.float32)
        k = r.normal(size=(tk, dim)).astype(np.float32)
        v = r.normal(size=(tk, dim)).astype(np.float32)
        worst = max(worst, np.abs(attn(Tensor(q), Tensor(k), Tensor(v)).data - _attn_oracle(attn, q, k, v)).max())
    assert worst < ATOL


def test_attention_single_token_reduces_to_value_path(rng):
    attn = Attention(8, 2, rng)
    v = rng.normal(size=(1, 8)).astype(np.float32)
    q = rng.normal(size=(1, 8)).astype(np.float32)
    y = attn(Tensor(q), Tensor(v), Tensor(v)).data
    expected = (v @ attn.v_proj.weight.data.T + attn.v_proj.bias.data) @ attn.out_proj.weight.data.T
    np.testing.assert_allclose(y, expected + attn.out_proj.bias.data, atol=1e-5)
