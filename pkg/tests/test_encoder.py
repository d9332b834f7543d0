import numpy as np
import pytest

from qtseg.blocks import ConfigError
from qtseg.config import ModelConfig
from qtseg.encoder import FPNEncoder, _concat_aligned, build_encoder
from qtseg.gradcheck import gradcheck
from qtseg.tensor import ShapeError, Tensor, no_grad, precision


def _shapes(n, size):
    enc = FPNEncoder(n, np.random.default_rng(0))
    with no_grad():
        feats = enc(Tensor(np.zeros((1, 3, size, size))))
    return [f.shape[1:] for f in feats]


def test_pyramid_at_512_n16():
    assert _shapes(16, 512) == [(64, 64, 64), (128, 32, 32), (256, 16, 16)]


def test_pyramid_at_256_n16():
    assert _shapes(16, 256) == [(64, 32, 32), (128, 16, 16), (256, 8, 8)]


def test_pyramid_at_64_n4():
    assert _shapes(4, 64) == [(16, 8, 8), (32, 4, 4), (64, 2, 2)]


def test_table_widths():
    enc = FPNEncoder(16, np.random.default_rng(0))
    assert enc.conv7.c_out == 256
    assert enc.c2f4.b == 2
    assert [enc.c2f2.b, enc.c2f6.b, enc.c2f8.b] == [1, 2, 1]
    assert enc.conv0.k == 3 and enc.conv0.s == 2


def test_builds_are_bit_identical():
    a = build_encoder(ModelConfig(n=4), 7).state_dict()
    b = build_encoder(ModelConfig(n=4), 7).state_dict()
    c = build_encoder(ModelConfig(n=4), 8).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_invalid_inputs():
    with pytest.raises(ConfigError):
        FPNEncoder(6, np.random.default_rng(0))
    enc = FPNEncoder(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        enc(Tensor(np.zeros((1, 3, 48, 64))))
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((1, 1, 64, 64))))


def test_grayscale_encoder():
    enc = FPNEncoder(4, np.random.default_rng(0), in_channels=1)
    assert enc(Tensor(np.zeros((2, 1, 64, 96)))).s2.shape == (2, 64, 2, 3)


def test_concat_alignment_is_checked():
    with pytest.raises(ShapeError):
        _concat_aligned(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))))


def test_encode_is_deterministic(rng):
    enc = FPNEncoder(4, np.random.default_rng(0))
    x = Tensor(rng.normal(size=(2, 3, 64, 64)))
    first = [f.data.copy() for f in enc(x)]
    second = [f.data for f in enc(x)]
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_encoder_gradcheck():
    with precision(np.float64):
        rng = np.random.default_rng(0)
        enc = FPNEncoder(4, rng)
        x = Tensor(rng.uniform(size=(2, 3, 64, 64)))
        weights = [rng.normal(size=(2, c, s, s)) for c, s in [(16, 8), (32, 4), (64, 2)]]

        def loss():
            out = None
            for f, w in zip(enc(x), weights):
                term = (f * Tensor(w)).sum()
                out = term if out is None else out + term
            return out

        res = gradcheck(loss, enc.parameters(), 50, delta=1e-3, skip_kinks=True)
    assert res.passed(1e-2), (res.max_rel_error, res.worst)
