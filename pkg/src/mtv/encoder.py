"""Pre-norm transformer encoder for one view.

Tokens are kept as ``[B, n_t, m, d]``.  With factorized attention each
temporal slice is an independent attention group; the unfactorized scope
merges all slices into one group of ``n_t * m`` tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import FACTORIZED, EncoderConfig
from .errors import DimensionError
from .tensor import Tensor
from .tokenizer import TokenSet


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class LayerParams:
    ln1_scale: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_scale: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """``[..., n, d]`` to ``[..., heads, n, d / heads]``."""
    d = x.shape[-1]
    if d % num_heads:
        raise DimensionError(f"width {d} is not divisible by {num_heads} heads")
    x = tn.reshape(x, x.shape[:-1] + (num_heads, d // num_heads))
    return tn.swapaxes(x, -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    x = tn.swapaxes(x, -3, -2)
    return tn.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns ``(output, weights)``."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * scale
    weights = tn.softmax(scores, axis=-1)
    return tn.matmul(weights, v), weights


def msa(x: Tensor, p: AttentionParams, num_heads: int, extra: tuple[Tensor, Tensor, Tensor] | None = None) -> Tensor:
    """Multi-head self-attention over the second-to-last axis.

    ``extra`` optionally carries head-split ``(keys, values, gate)`` of
    additional tokens: the output becomes ``own + gate * (joint - own)``
    where ``joint`` also attends to the extra tokens.  A zero gate leaves
    the result bitwise equal to plain self-attention.
    """
    q = split_heads(tn.linear(x, p.wq, p.bq), num_heads)
    k = split_heads(tn.linear(x, p.wk, p.bk), num_heads)
    v = split_heads(tn.linear(x, p.wv, p.bv), num_heads)
    out, _ = attend(q, k, v)
    if extra is not None:
        ke, ve, gate = extra
        joint, _ = attend(q, tn.concat([k, ke], axis=-2), tn.concat([v, ve], axis=-2))
        out = out + gate * (joint - out)
    return tn.linear(merge_heads(out), p.wo, p.bo)


def mlp(x: Tensor, p: LayerParams, extra: Tensor | None = None, extra_weight: Tensor | None = None) -> Tensor:
    """Two-layer GeLU MLP.  ``extra @ extra_weight`` is added before the GeLU."""
    h = tn.linear(x, p.mlp_w1, p.mlp_b1)
    if extra is not None:
        h = h + tn.linear(extra, extra_weight)
    return tn.linear(tn.gelu(h), p.mlp_w2, p.mlp_b2)


def scale_branch(branch: Tensor, scale: np.ndarray | None) -> Tensor:
    if scale is None:
        return branch
    shape = (scale.shape[0],) + (1,) * (branch.ndim - 1)
    return branch * tn.Tensor(scale.reshape(shape).astype(branch.dtype))


def encoder_layer(
    x: Tensor,
    p: LayerParams,
    cfg: EncoderConfig,
    branch_scale: np.ndarray | None = None,
    attn_extra: tuple[Tensor, Tensor, Tensor] | None = None,
    mlp_extra: tuple[Tensor, Tensor] | None = None,
) -> Tensor:
    """One pre-norm block: ``y = x + MSA(LN(x))``, ``out = y + MLP(LN(y))``.

    ``branch_scale`` holds one multiplier per sample for both residual
    branches (droplayer); a zero entry passes that sample through unchanged.
    """
    if branch_scale is not None and not np.any(branch_scale):
        return x
    h = tn.layer_norm(x, p.ln1_scale, p.ln1_bias)
    y = x + scale_branch(msa(h, p.attn, cfg.num_heads, attn_extra), branch_scale)
    h = tn.layer_norm(y, p.ln2_scale, p.ln2_bias)
    if mlp_extra is None:
        m = mlp(h, p)
    else:
        m = mlp(h, p, *mlp_extra)
    return y + scale_branch(m, branch_scale)


def droplayer_rates(cfg: EncoderConfig) -> np.ndarray:
    """Per-layer drop probability, rising linearly from 0 to the configured rate."""
    if cfg.num_layers == 0:
        return np.zeros(0)
    if cfg.num_layers == 1:
        return np.array([cfg.droplayer_rate])
    return np.linspace(0.0, cfg.droplayer_rate, cfg.num_layers)


def droplayer_scale(rng: np.random.Generator, rate: float, batch: int) -> np.ndarray | None:
    """Per-sample branch multipliers: 0 when dropped, ``1 / (1 - rate)`` otherwise."""
    if rate <= 0.0:
        return None
    keep = rng.random(batch) >= rate
    return keep / (1.0 - rate)


def to_groups(x: Tensor, cfg: EncoderConfig) -> Tensor:
    """``[B, n_t, m, d]`` to attention groups for the configured scope."""
    if cfg.attention_scope == FACTORIZED:
        return x
    B, n_t, m, d = x.shape
    return tn.reshape(x, (B, 1, n_t * m, d))


def from_groups(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return x if x.shape == shape else tn.reshape(x, shape)


def run_layers(
    tokens: TokenSet,
    cfg: EncoderConfig,
    layers: list[LayerParams],
    start: int = 0,
    stop: int | None = None,
    scales: list[np.ndarray | None] | None = None,
) -> TokenSet:
    """Apply layers ``start`` to ``stop - 1`` of one view encoder."""
    stop = len(layers) if stop is None else stop
    x = tokens.tokens
    shape = x.shape
    g = to_groups(x, cfg)
    for i in range(start, stop):
        g = encoder_layer(g, layers[i], cfg, None if scales is None else scales[i])
    return TokenSet(from_groups(g, shape), tokens.view_index, tokens.grid)


def run_view_encoder(
    tokens: TokenSet,
    cfg: EncoderConfig,
    layers: list[LayerParams],
    scales: list[np.ndarray | None] | None = None,
) -> TokenSet:
    if len(layers) != cfg.num_layers:
        raise DimensionError(f"encoder has {len(layers)} layers, config expects {cfg.num_layers}")
    return run_layers(tokens, cfg, layers, scales=scales)


def pool_view_cls(tokens: TokenSet | Tensor) -> Tensor:
    """Mean of the per-slice class tokens, ``[B, d]``."""
    x = tokens.tokens if isinstance(tokens, TokenSet) else tokens
    cls = tn.take(x, (slice(None), slice(None), 0))
    return tn.mean(cls, axis=1)
