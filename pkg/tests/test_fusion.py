import dataclasses
import math

import numpy as np
import pytest
from conftest import small_config

from mtv import tensor as tn
from mtv.config import toy_variant
from mtv.encoder import mlp
from mtv.errors import ConfigError
from mtv.fusion import (
    CVAParams,
    align_to_grid,
    cross_view_attention,
    fusion_param_count,
    fusion_positions,
    group_tokens,
    validate_fusion,
)
from mtv.gradcheck import model_check
from mtv.model import build_model, forward, named_parameters
from mtv.tensor import Tensor


def random_cva(rng, dc, df):
    def r(*s):
        return Tensor(rng.standard_normal(s) * 0.5)

    return CVAParams(r(df, dc), r(dc), r(dc, dc), r(dc), r(dc, dc), r(dc), r(dc, dc), r(dc))


def loop_cva(q_tokens, kv_tokens, p, heads):
    """Per-token oracle: one query row against a list of key/value rows."""
    kv = kv_tokens @ p.proj_w.data + p.proj_b.data
    q = q_tokens @ p.wq.data + p.bq.data
    k = kv @ p.wk.data + p.bk.data
    v = kv @ p.wv.data + p.bv.data
    d = q.shape[-1]
    dh = d // heads
    out = q_tokens.copy()
    for i in range(q.shape[0]):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = np.array([q[i, sl] @ k[j, sl] for j in range(k.shape[0])]) / math.sqrt(dh)
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] += w @ v[:, sl]
    return out


class TestPositions:
    def test_same_depth_maps_identity(self):
        cfg = toy_variant((2, 4), (8, 8), clip_shape=(8, 4, 4, 1), spatial=2, num_layers=4, fusion_layers=(1, 3))
        assert fusion_positions(cfg) == [(1, 1), (3, 3)]

    def test_shallower_view_is_rescaled_and_clamped(self):
        from mtv.config import EncoderConfig

        cfg = toy_variant((2, 4), (8, 8), clip_shape=(8, 4, 4, 1), spatial=2, num_layers=12, fusion_layers=(5, 11))
        v0 = dataclasses.replace(cfg.views[0], encoder=EncoderConfig(6, 8, 32, 2))
        cfg = dataclasses.replace(cfg, views=(v0, cfg.views[1]))
        assert fusion_positions(cfg) == [(3, 5), (5, 11)]

    def test_within_layer_fusion_cannot_repeat_a_layer(self):
        from mtv.config import EncoderConfig

        cfg = toy_variant((2, 4), (8, 8), clip_shape=(8, 4, 4, 1), spatial=2, num_layers=4, fusion_layers=(2, 3), fusion_method="mlp")
        v0 = dataclasses.replace(cfg.views[0], encoder=EncoderConfig(1, 8, 32, 2))
        with pytest.raises(ConfigError, match="fuse twice"):
            validate_fusion(dataclasses.replace(cfg, views=(v0, cfg.views[1])))

    def test_too_many_bottleneck_tokens(self):
        with pytest.raises(ConfigError, match="bottleneck"):
            build_model(small_config("bottleneck", bottleneck_tokens=8))
        build_model(small_config("bottleneck", bottleneck_tokens=7))


class TestCrossViewAttention:
    def test_local_matches_loop_oracle(self, rng):
        p = random_cva(rng, 8, 6)
        q = rng.standard_normal((1, 2, 3, 8))
        src = rng.standard_normal((1, 4, 3, 6))
        out, _ = cross_view_attention(Tensor(q), Tensor(src), p, heads := 2)
        for g in range(2):
            kv = src[0, 2 * g : 2 * g + 2].reshape(-1, 6)
            np.testing.assert_allclose(out.data[0, g], loop_cva(q[0, g], kv, p, heads), rtol=1e-10)

    def test_global_matches_loop_oracle(self, rng):
        p = random_cva(rng, 8, 6)
        q = rng.standard_normal((1, 2, 3, 8))
        src = rng.standard_normal((1, 4, 3, 6))
        out, w = cross_view_attention(Tensor(q), Tensor(src), p, 2, "global")
        assert w.shape[-1] == 12
        for g in range(2):
            np.testing.assert_allclose(out.data[0, g], loop_cva(q[0, g], src[0].reshape(-1, 6), p, 2), rtol=1e-10)

    def test_local_scope_is_temporally_local(self, rng):
        p = random_cva(rng, 8, 6)
        q = rng.standard_normal((1, 2, 3, 8))
        src = rng.standard_normal((1, 4, 3, 6))
        src2 = src.copy()
        src2[0, 3] += 1.0
        a, _ = cross_view_attention(Tensor(q), Tensor(src), p, 2)
        b, _ = cross_view_attention(Tensor(q), Tensor(src2), p, 2)
        np.testing.assert_array_equal(a.data[0, 0], b.data[0, 0])
        assert np.abs(a.data[0, 1] - b.data[0, 1]).max() > 1e-6

    def test_group_tokens(self):
        x = Tensor(np.arange(2 * 4 * 3 * 1.0).reshape(1, 4, 3, 2))
        assert group_tokens(x, 2).shape == (1, 2, 6, 2)
        assert group_tokens(x, 4) is x
        assert group_tokens(x, 2, "global").shape == (1, 1, 12, 2)

    def test_local_needs_divisible_slices(self):
        cfg = toy_variant((2, 3), (8, 8), clip_shape=(6, 4, 4, 1), spatial=2, num_layers=1, fusion_layers=(0,))
        with pytest.raises(ConfigError):
            validate_fusion(cfg)


class TestMLPFusion:
    def test_align_to_grid_matches_loops(self, rng):
        x = rng.standard_normal((1, 4, 1 + 4 * 4, 3))
        out = align_to_grid(Tensor(x), (4, 4, 4), (2, 2, 2)).data
        assert out.shape == (1, 2, 5, 3)
        for tc in range(2):
            np.testing.assert_allclose(out[0, tc, 0], x[0, 2 * tc : 2 * tc + 2, 0].mean(0), rtol=1e-14)
            for r in range(2):
                for c in range(2):
                    cells = [
                        x[0, t, 1 + rr * 4 + cc]
                        for t in range(2 * tc, 2 * tc + 2)
                        for rr in range(2 * r, 2 * r + 2)
                        for cc in range(2 * c, 2 * c + 2)
                    ]
                    np.testing.assert_allclose(out[0, tc, 1 + r * 2 + c], np.mean(cells, axis=0), rtol=1e-13)

    def test_extra_input_equals_channel_concat(self, rng):
        layer = build_model(small_config()).views[0].layers[0]
        h, f, wf = rng.standard_normal((5, 8)), rng.standard_normal((5, 6)), rng.standard_normal((6, 16))
        got = mlp(Tensor(h), layer, Tensor(f), Tensor(wf)).data
        w1 = np.concatenate([layer.mlp_w1.data, wf])
        hidden = np.concatenate([h, f], axis=1) @ w1 + layer.mlp_b1.data
        from scipy.special import erf

        want = (0.5 * hidden * (1 + erf(hidden / math.sqrt(2)))) @ layer.mlp_w2.data + layer.mlp_b2.data
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestZeroInitIdentity:
    @pytest.mark.parametrize(
        "method,kw",
        [("cva", {}), ("cva", {"scope": "global"}), ("bottleneck", {}), ("bottleneck", {"bottleneck_tokens": 3}), ("mlp", {"mlp_zero_init": True})],
    )
    def test_fused_equals_unfused_bitwise(self, rng, method, kw):
        base = build_model(small_config())
        fused = build_model(small_config(method, **kw))
        clips = rng.standard_normal((10, 4, 4, 4, 1))
        np.testing.assert_array_equal(forward(fused, clips).data, forward(base, clips).data)

    @pytest.mark.parametrize("method", ["cva", "bottleneck", "mlp"])
    def test_opening_the_path_changes_output(self, rng, method):
        base = build_model(small_config())
        fused = build_model(small_config(method))
        for name, t in named_parameters(fused):
            if name.startswith("fusion"):
                t.data = t.data + rng.standard_normal(t.shape)
        clips = rng.standard_normal((2, 4, 4, 4, 1))
        assert np.abs(forward(fused, clips).data - forward(base, clips).data).max() > 1e-6


class TestParamsAndGradients:
    @pytest.mark.parametrize("method", ["cva", "bottleneck", "mlp"])
    def test_param_count(self, method):
        cfg = small_config(method, layers=(0, 1), num_layers=2)
        params = build_model(cfg)
        n = sum(t.size for name, t in named_parameters(params) if name.startswith("fusion"))
        assert n == fusion_param_count(cfg)

    @pytest.mark.parametrize(
        "method,kw",
        [("cva", {"scope": "global"}), ("bottleneck", {"bottleneck_tokens": 2}), ("mlp", {}), ("none", {"attention": "unfactorized"})],
    )
    def test_end_to_end_gradients(self, method, kw):
        cfg = small_config(method, **kw)
        assert model_check(cfg, seed=3, max_coords=12).max_rel_error < 1e-4

    def test_three_view_chain_gradients(self):
        cfg = toy_variant((2, 4, 8), (8, 6, 4), clip_shape=(8, 4, 4, 1), spatial=2, num_layers=1, num_classes=3, global_width=8)
        assert model_check(cfg, seed=1, max_coords=8).max_rel_error < 1e-4
