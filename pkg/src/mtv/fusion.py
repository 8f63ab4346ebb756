"""Lateral connections between view encoders.

Views are indexed coarse (0) to fine (V-1).  Every fusion method passes
information from view ``i + 1`` to view ``i``:

* ``cva``: before the fusion layer, coarse tokens cross-attend to projected
  fine tokens, ``z_c += Attn(Wq z_c, Wk P z_f, Wv P z_f)``.  The value path
  starts at zero so a fresh model behaves as without fusion.
* ``bottleneck``: inside the fusion layer the fine view carries learned
  bottleneck tokens that attend to its tokens; their outputs are projected
  and offered as extra keys/values to the coarse view.  The coarse tokens mix
  the extra attention in through a gate that starts at zero.
* ``mlp``: inside the fusion layer the coarse MLP also reads the fine MLP
  input, average-pooled onto the coarse token grid.

Fusion layers are given for the deepest view; shallower views fuse at
``round(l * L_view / L_deepest)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .config import FACTORIZED, MTVConfig
from .encoder import (
    LayerParams,
    attend,
    from_groups,
    merge_heads,
    mlp,
    msa,
    run_layers,
    split_heads,
    scale_branch,
    to_groups,
)
from .errors import ConfigError, DimensionError
from .tensor import Tensor
from .tokenizer import TokenSet


@dataclass
class CVAParams:
    proj_w: Tensor  # [d_fine, d_coarse]
    proj_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor


@dataclass
class BottleneckParams:
    tokens: Tensor  # [n_bottleneck, d_fine]
    proj_w: Tensor  # [d_fine, d_coarse]
    proj_b: Tensor
    gate: Tensor  # [1]


@dataclass
class MLPFusionParams:
    weight: Tensor  # [d_fine, mlp_dim_coarse]


PairParams = CVAParams | BottleneckParams | MLPFusionParams


def fusion_positions(config: MTVConfig) -> list[tuple[int, ...]]:
    """Per fusion layer, the layer index at which each view fuses."""
    depths = [v.encoder.num_layers for v in config.views]
    deepest = max(depths)
    events = []
    for l in config.fusion.layers:
        events.append(tuple(min(L - 1, int(math.floor(l * L / deepest + 0.5))) for L in depths))
    return events


def validate_fusion(config: MTVConfig) -> None:
    """Check that the configured fusion is realisable for these views."""
    f = config.fusion
    if not f.active or config.num_views < 2:
        return
    grids = config.grids()
    if f.method == "bottleneck":
        for i in range(1, config.num_views):
            n_t, gh, gw = grids[i]
            if f.bottleneck_tokens >= n_t * gh * gw:
                raise ConfigError(
                    f"{f.bottleneck_tokens} bottleneck tokens for view {i} with only {n_t * gh * gw} tokens"
                )
    if f.method != "cva":
        events = fusion_positions(config)
        for j in range(config.num_views):
            pos = [e[j] for e in events]
            if any(b <= a for a, b in zip(pos, pos[1:])):
                raise ConfigError(f"view {j} would fuse twice in layer(s) {pos}; use fewer fusion layers")
    for i in range(config.num_views - 1):
        c, fgrid = grids[i], grids[i + 1]
        if f.method == "cva" and f.cva_scope == "local" and fgrid[0] % c[0]:
            raise ConfigError(f"views {i} and {i + 1}: {fgrid[0]} temporal slices do not group into {c[0]}")
        if f.method == "mlp":
            if fgrid[0] % c[0] or fgrid[1] % c[1] or fgrid[2] % c[2]:
                raise ConfigError(f"views {i} and {i + 1}: token grids {fgrid} and {c} do not align")
        if f.method == "bottleneck":
            gc = _num_groups(config, i)
            gf = _num_groups(config, i + 1)
            if gf % gc and gf != 1:
                raise ConfigError(f"views {i} and {i + 1}: {gf} attention groups do not group into {gc}")


def _num_groups(config: MTVConfig, i: int) -> int:
    v = config.views[i]
    return config.grids()[i][0] if v.encoder.attention_scope == FACTORIZED else 1


# ---------------------------------------------------------------------------
# cross-view attention


def group_tokens(x: Tensor, groups: int, scope: str = "local") -> Tensor:
    """Regroup ``[B, n, m, d]`` into ``[B, groups, (n / groups) * m, d]``.

    ``scope="global"`` puts every token into one group that is shared by all
    receiving groups through broadcasting.
    """
    B, n, m, d = x.shape
    if scope == "global":
        return tn.reshape(x, (B, 1, n * m, d))
    if n == groups:
        return x
    if n % groups:
        raise DimensionError(f"cannot group {n} slices into {groups}")
    return tn.reshape(x, (B, groups, (n // groups) * m, d))


def cross_view_attention(
    query: Tensor,
    source: Tensor,
    p: CVAParams,
    num_heads: int,
    scope: str = "local",
) -> tuple[Tensor, Tensor]:
    """Residual cross-attention update of ``query`` ``[B, n_c, m_c, d_c]``.

    Returns ``(updated query, attention weights)``.
    """
    kv = tn.linear(group_tokens(source, query.shape[1], scope), p.proj_w, p.proj_b)
    q = split_heads(tn.linear(query, p.wq, p.bq), num_heads)
    k = split_heads(tn.linear(kv, p.wk, p.bk), num_heads)
    v = split_heads(tn.linear(kv, p.wv, p.bv), num_heads)
    out, weights = attend(q, k, v)
    return query + merge_heads(out), weights


def cva(coarse: TokenSet, fine: TokenSet, p: CVAParams, num_heads: int, scope: str = "local") -> TokenSet:
    out, _ = cross_view_attention(coarse.tokens, fine.tokens, p, num_heads, scope)
    return TokenSet(out, coarse.view_index, coarse.grid)


# ---------------------------------------------------------------------------
# MLP fusion


def align_to_grid(x: Tensor, fine_grid: tuple[int, int, int], coarse_grid: tuple[int, int, int]) -> Tensor:
    """Average-pool fine tokens ``[B, n_t, 1 + rows*cols, d]`` onto a coarser grid.

    Class tokens are averaged over the pooled slices.
    """
    B = x.shape[0]
    d = x.shape[-1]
    (tf, hf, wf), (tc, hc, wc) = fine_grid, coarse_grid
    if tf % tc or hf % hc or wf % wc:
        raise DimensionError(f"fine grid {fine_grid} does not pool onto {coarse_grid}")
    rt, rh, rw = tf // tc, hf // hc, wf // wc
    cls = tn.take(x, (slice(None), slice(None), slice(0, 1)))
    cls = tn.mean(tn.reshape(cls, (B, tc, rt, 1, d)), axis=2)
    pat = tn.take(x, (slice(None), slice(None), slice(1, None)))
    pat = tn.reshape(pat, (B, tc, rt, hc, rh, wc, rw, d))
    pat = tn.mean(tn.mean(tn.mean(pat, axis=6), axis=4), axis=2)
    pat = tn.reshape(pat, (B, tc, hc * wc, d))
    return tn.concat([cls, pat], axis=2)


# ---------------------------------------------------------------------------
# fused layers


def _mlp_fused_layer(
    tokens: list[Tensor],
    config: MTVConfig,
    layers: list[LayerParams],
    pairs: Sequence[MLPFusionParams],
    scales: list[np.ndarray | None],
) -> list[Tensor]:
    grids = config.grids()
    V = len(tokens)
    ys, hs = [], []
    for j in range(V):
        cfg = config.views[j].encoder
        p = layers[j]
        x = tokens[j]
        g = to_groups(x, cfg)
        if scales[j] is not None and not np.any(scales[j]):
            ys.append(None)
            hs.append(tn.layer_norm(x, p.ln2_scale, p.ln2_bias))
            continue
        h = tn.layer_norm(g, p.ln1_scale, p.ln1_bias)
        y = g + scale_branch(msa(h, p.attn, cfg.num_heads), scales[j])
        ys.append(y)
        hs.append(from_groups(tn.layer_norm(y, p.ln2_scale, p.ln2_bias), x.shape))
    out = []
    for j in range(V):
        if ys[j] is None:
            out.append(tokens[j])
            continue
        cfg = config.views[j].encoder
        p = layers[j]
        h = to_groups(hs[j], cfg)
        if j + 1 < V:
            extra = to_groups(align_to_grid(hs[j + 1], grids[j + 1], grids[j]), cfg)
            m = mlp(h, p, extra, pairs[j].weight)
        else:
            m = mlp(h, p)
        out.append(from_groups(ys[j] + scale_branch(m, scales[j]), tokens[j].shape))
    return out


def _bottleneck_fused_layer(
    tokens: list[Tensor],
    config: MTVConfig,
    layers: list[LayerParams],
    pairs: Sequence[BottleneckParams],
    scales: list[np.ndarray | None],
) -> list[Tensor]:
    V = len(tokens)
    out: list[Tensor | None] = [None] * V
    carried = None  # updated bottleneck rows of view j + 1, [B, G, nb, d]
    for j in reversed(range(V)):
        cfg = config.views[j].encoder
        p = layers[j]
        x = tokens[j]
        g = to_groups(x, cfg)
        B, G = g.shape[0], g.shape[1]
        heads = cfg.num_heads
        inj = None
        if carried is not None:
            pr = pairs[j]
            src = carried
            if src.shape[1] != G:
                if src.shape[1] == 1:
                    src = tn.broadcast_to(src, (B, G) + src.shape[2:])
                else:
                    src = group_tokens(src, G)
            inj = tn.linear(src, pr.proj_w, pr.proj_b)
        own_b = None
        if j > 0:
            bt = pairs[j - 1].tokens
            own_b = tn.broadcast_to(tn.reshape(bt, (1, 1) + bt.shape), (B, G) + bt.shape)

        scale = scales[j]
        if scale is not None and not np.any(scale):
            out[j] = x
            carried = own_b
            continue

        hx = tn.layer_norm(g, p.ln1_scale, p.ln1_bias)
        a = p.attn
        q = split_heads(tn.linear(hx, a.wq, a.bq), heads)
        k = split_heads(tn.linear(hx, a.wk, a.bk), heads)
        v = split_heads(tn.linear(hx, a.wv, a.bv), heads)
        att, _ = attend(q, k, v)
        keys, vals = [k], [v]
        if inj is not None:
            hi = tn.layer_norm(inj, p.ln1_scale, p.ln1_bias)
            ki = split_heads(tn.linear(hi, a.wk, a.bk), heads)
            vi = split_heads(tn.linear(hi, a.wv, a.bv), heads)
            joint, _ = attend(q, tn.concat([k, ki], axis=-2), tn.concat([v, vi], axis=-2))
            att = att + pairs[j].gate * (joint - att)
        y = g + scale_branch(tn.linear(merge_heads(att), a.wo, a.bo), scale)
        y = y + scale_branch(mlp(tn.layer_norm(y, p.ln2_scale, p.ln2_bias), p), scale)
        out[j] = from_groups(y, x.shape)

        if own_b is not None:
            hb = tn.layer_norm(own_b, p.ln1_scale, p.ln1_bias)
            qb = split_heads(tn.linear(hb, a.wq, a.bq), heads)
            kb = split_heads(tn.linear(hb, a.wk, a.bk), heads)
            vb = split_heads(tn.linear(hb, a.wv, a.bv), heads)
            keys.append(kb)
            vals.append(vb)
            if inj is not None:
                keys.append(ki)
                vals.append(vi)
            ab, _ = attend(qb, tn.concat(keys, axis=-2), tn.concat(vals, axis=-2))
            yb = own_b + scale_branch(tn.linear(merge_heads(ab), a.wo, a.bo), scale)
            yb = yb + scale_branch(mlp(tn.layer_norm(yb, p.ln2_scale, p.ln2_bias), p), scale)
            carried = yb
        else:
            carried = None
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# multiview schedule


def run_multiview(
    tokensets: list[TokenSet],
    config: MTVConfig,
    view_layers: list[list[LayerParams]],
    fusion_params: list[list[PairParams]],
    scales: list[list[np.ndarray | None]] | None = None,
) -> list[TokenSet]:
    """Run all view encoders in lockstep, applying fusion at its mapped layers."""
    V = len(tokensets)
    if scales is None:
        scales = [[None] * len(view_layers[j]) for j in range(V)]
    f = config.fusion
    if not f.active or V < 2:
        return [
            run_layers(ts, config.views[j].encoder, view_layers[j], scales=scales[j]) for j, ts in enumerate(tokensets)
        ]
    events = fusion_positions(config)
    if len(fusion_params) != len(events):
        raise DimensionError(f"{len(fusion_params)} fusion parameter sets for {len(events)} fusion layers")
    cur = list(tokensets)
    pos = [0] * V

    def advance(j: int, stop: int) -> None:
        if stop > pos[j]:
            cur[j] = run_layers(cur[j], config.views[j].encoder, view_layers[j], pos[j], stop, scales[j])
            pos[j] = stop

    for e, at in enumerate(events):
        for j in range(V):
            advance(j, at[j])
        pairs = fusion_params[e]
        if f.method == "cva":
            for i in reversed(range(V - 1)):
                heads = config.views[i].encoder.num_heads
                cur[i] = cva(cur[i], cur[i + 1], pairs[i], heads, f.cva_scope)
            continue
        xs = [ts.tokens for ts in cur]
        layer_p = [view_layers[j][at[j]] for j in range(V)]
        layer_s = [scales[j][at[j]] for j in range(V)]
        if f.method == "mlp":
            ys = _mlp_fused_layer(xs, config, layer_p, pairs, layer_s)
        else:
            ys = _bottleneck_fused_layer(xs, config, layer_p, pairs, layer_s)
        for j in range(V):
            cur[j] = TokenSet(ys[j], cur[j].view_index, cur[j].grid)
            pos[j] = at[j] + 1
    for j in range(V):
        advance(j, len(view_layers[j]))
    return cur


def fusion_param_count(config: MTVConfig) -> int:
    """Parameters added by the configured fusion, over all fusion layers and pairs."""
    f = config.fusion
    if not f.active or config.num_views < 2:
        return 0
    per_layer = 0
    for i in range(config.num_views - 1):
        dc, df = config.views[i].hidden_size, config.views[i + 1].hidden_size
        if f.method == "cva":
            per_layer += df * dc + dc + 3 * (dc * dc + dc)
        elif f.method == "bottleneck":
            per_layer += f.bottleneck_tokens * df + df * dc + dc + 1
        else:
            per_layer += df * config.views[i].encoder.mlp_dim
    return per_layer * len(f.layers)
