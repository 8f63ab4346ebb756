import math

import numpy as np
import pytest
from conftest import small_config
from scipy.special import erf

from mtv import tensor as tn
from mtv.config import EncoderConfig
from mtv.encoder import (
    attend,
    droplayer_rates,
    droplayer_scale,
    encoder_layer,
    msa,
    pool_view_cls,
    run_layers,
    run_view_encoder,
    split_heads,
)
from mtv.errors import DimensionError
from mtv.model import build_model
from mtv.tensor import Tensor
from mtv.tokenizer import TokenSet


def np_layer(x, p, heads):
    """Independent numpy transcription of one pre-norm block."""

    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(v.var(-1, keepdims=True) + 1e-6) * g + b

    def gelu(v):
        return 0.5 * v * (1 + erf(v / math.sqrt(2)))

    a = p.attn
    h = ln(x, p.ln1_scale.data, p.ln1_bias.data)
    n, d = h.shape
    dh = d // heads
    q, k, v = (h @ w.data + b.data for w, b in [(a.wq, a.bq), (a.wk, a.bk), (a.wv, a.bv)])
    out = np.zeros_like(h)
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        w = np.exp(s - s.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    y = x + out @ a.wo.data + a.bo.data
    h = ln(y, p.ln2_scale.data, p.ln2_bias.data)
    return y + gelu(h @ p.mlp_w1.data + p.mlp_b1.data) @ p.mlp_w2.data + p.mlp_b2.data


def perturbed_layer(rng, d=8, mlp=16):
    params = build_model(small_config())
    layer = params.views[0].layers[0]
    for name in vars(layer):
        t = getattr(layer, name)
        if isinstance(t, Tensor):
            t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    for t in vars(layer.attn).values():
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    return layer


class TestAttention:
    def test_attend_matches_loop(self, rng):
        q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 2))
        out, w = attend(Tensor(q), Tensor(k), Tensor(v))
        for i in range(3):
            s = np.array([q[i] @ k[j] / 2.0 for j in range(5)])
            e = np.exp(s - s.max())
            np.testing.assert_allclose(w.data[i], e / e.sum(), rtol=1e-12)
            np.testing.assert_allclose(out.data[i], (e / e.sum()) @ v, rtol=1e-12)

    def test_split_heads_shape(self):
        x = Tensor(np.zeros((2, 3, 5, 8)))
        assert split_heads(x, 2).shape == (2, 3, 2, 5, 4)

    def test_zero_gate_extra_is_bitwise_plain(self, rng):
        layer = perturbed_layer(rng)
        x = Tensor(rng.standard_normal((2, 5, 8)))
        extra = (Tensor(rng.standard_normal((2, 2, 3, 4))), Tensor(rng.standard_normal((2, 2, 3, 4))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(msa(x, layer.attn, 2).data, msa(x, layer.attn, 2, extra).data)


class TestEncoderLayer:
    def test_matches_numpy_transcription(self, rng):
        layer = perturbed_layer(rng)
        x = rng.standard_normal((5, 8))
        out = encoder_layer(Tensor(x[None]), layer, EncoderConfig(1, 8, 16, 2)).data[0]
        np.testing.assert_allclose(out, np_layer(x, layer, 2), rtol=1e-10, atol=1e-12)

    def test_factorized_locality(self, rng):
        cfg = EncoderConfig(4, 8, 16, 2)
        layers = [perturbed_layer(rng) for _ in range(4)]
        x = rng.standard_normal((1, 3, 5, 8))
        y = x.copy()
        y[0, 1] += rng.standard_normal((5, 8))
        a = run_layers(TokenSet(Tensor(x), 0, (3, 2, 2)), cfg, layers).tokens.data
        b = run_layers(TokenSet(Tensor(y), 0, (3, 2, 2)), cfg, layers).tokens.data
        np.testing.assert_array_equal(a[0, [0, 2]], b[0, [0, 2]])
        assert np.abs(a[0, 1] - b[0, 1]).max() > 1e-3

    def test_unfactorized_mixes_time(self, rng):
        cfg = EncoderConfig(1, 8, 16, 2, "unfactorized")
        layers = [perturbed_layer(rng)]
        x = rng.standard_normal((1, 3, 5, 8))
        y = x.copy()
        y[0, 1] += rng.standard_normal((5, 8))
        a = run_layers(TokenSet(Tensor(x), 0, (3, 2, 2)), cfg, layers).tokens.data
        b = run_layers(TokenSet(Tensor(y), 0, (3, 2, 2)), cfg, layers).tokens.data
        assert np.abs(a[0, 0] - b[0, 0]).max() > 1e-6

    def test_layer_count_mismatch_raises(self, rng):
        with pytest.raises(DimensionError):
            run_view_encoder(TokenSet(Tensor(np.zeros((1, 1, 5, 8))), 0, (1, 2, 2)), EncoderConfig(2, 8, 16, 2), [perturbed_layer(rng)])

    def test_pool_view_cls_is_mean_over_slices(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        np.testing.assert_allclose(pool_view_cls(Tensor(x)).data, x[:, :, 0].mean(axis=1), rtol=1e-14)


class TestDroplayer:
    def test_rates_rise_linearly(self):
        np.testing.assert_allclose(droplayer_rates(EncoderConfig(5, 8, 16, 2, droplayer_rate=0.2)), [0, 0.05, 0.1, 0.15, 0.2])
        np.testing.assert_array_equal(droplayer_rates(EncoderConfig(3, 8, 16, 2)), [0, 0, 0])

    def test_scale_values(self):
        s = droplayer_scale(np.random.default_rng(0), 0.5, 1000)
        assert set(np.unique(s)) <= {0.0, 2.0}
        assert 400 < np.count_nonzero(s) < 600
        assert droplayer_scale(np.random.default_rng(0), 0.0, 4) is None

    def test_dropped_samples_pass_through(self, rng):
        layer = perturbed_layer(rng)
        cfg = EncoderConfig(1, 8, 16, 2)
        x = Tensor(rng.standard_normal((2, 5, 8)))
        out = encoder_layer(x, layer, cfg, np.array([0.0, 1.0])).data
        np.testing.assert_array_equal(out[0], x.data[0])
        np.testing.assert_allclose(out[1], encoder_layer(x, layer, cfg).data[1], rtol=1e-14)
        assert encoder_layer(x, layer, cfg, np.zeros(2)) is x

    def test_gradient_through_droplayer(self, rng):
        from mtv.gradcheck import gradcheck

        layer = perturbed_layer(rng)
        cfg = EncoderConfig(1, 8, 16, 2)
        scale = np.array([0.0, 1.25])
        r = gradcheck(lambda x: tn.sum_(encoder_layer(x, layer, cfg, scale) * 0.7), Tensor(rng.standard_normal((2, 5, 8))))
        assert r.max_rel_error < 1e-4
