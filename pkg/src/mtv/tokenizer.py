"""Tubelet tokenization of video clips.

A clip ``[T, H, W, C]`` is cut into non-overlapping ``t x h x w`` tubelets.
Frames or pixels that do not fill a whole tubelet are dropped.  Each tubelet
is flattened in ``(t, h, w, C)`` order, linearly embedded, and the tokens of
one temporal slice are preceded by a class token.  The resulting layout is
``[..., n_t, 1 + rows * cols, d]`` with the class token at index 0 of every
slice; a single learned positional table of the same shape is added.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import tensor as tn
from .config import TubeletSpec, ViewSpec, token_grid
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class EmbeddingParams:
    kernel: Tensor  # [t*h*w*C, d]
    bias: Tensor  # [d]
    cls: Tensor  # [d]
    pos: Tensor  # [n_t, 1 + rows*cols, d]


@dataclass
class TokenSet:
    """Tokens of one view, ``[B, n_t, 1 + rows*cols, d]`` (class token first)."""

    tokens: Tensor
    view_index: int
    grid: tuple[int, int, int]

    @property
    def num_patches(self) -> int:
        n_t, gh, gw = self.grid
        return n_t * gh * gw

    @property
    def hidden_size(self) -> int:
        return self.tokens.shape[-1]


def count_tokens(clip_shape: Sequence[int], tubelet: TubeletSpec) -> int:
    """Number of tubelet tokens (class tokens excluded)."""
    if len(clip_shape) < 3:
        raise DimensionError(f"clip shape needs at least (T, H, W), got {tuple(clip_shape)}")
    n_t, gh, gw = token_grid(clip_shape, tubelet)
    return n_t * gh * gw


def _as_batched(clip) -> tuple[Tensor, bool]:
    clip = tn.as_tensor(clip)
    if clip.ndim == 4:
        return tn.reshape(clip, (1,) + clip.shape), True
    if clip.ndim == 5:
        return clip, False
    raise DimensionError(f"clip must be [T, H, W, C] or [B, T, H, W, C], got {clip.shape}")


def extract_tubelets(clip, tubelet: TubeletSpec) -> Tensor:
    """Cut a clip into flattened tubelets, ``[..., n_t, rows*cols, t*h*w*C]``.

    Spatial positions are scanned row-major.
    """
    x, single = _as_batched(clip)
    B, T, H, W, C = x.shape
    t, h, w = tubelet.t, tubelet.h, tubelet.w
    n_t, gh, gw = T // t, H // h, W // w
    if n_t == 0 or gh == 0 or gw == 0:
        raise DimensionError(f"tubelet {t}x{h}x{w} does not fit clip {x.shape[1:]}")
    if (n_t * t, gh * h, gw * w) != (T, H, W):
        x = tn.take(x, (slice(None), slice(0, n_t * t), slice(0, gh * h), slice(0, gw * w)))
    x = tn.reshape(x, (B, n_t, t, gh, h, gw, w, C))
    x = tn.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    x = tn.reshape(x, (B, n_t, gh * gw, t * h * w * C))
    if single:
        x = tn.reshape(x, x.shape[1:])
    return x


def tokenize_view(clip, view: ViewSpec, params: EmbeddingParams, view_index: int = 0) -> TokenSet:
    """Embed one view of a clip (or batch of clips) into a :class:`TokenSet`."""
    x, _ = _as_batched(clip)
    patches = extract_tubelets(x, view.tubelet)
    B, n_t, n_s, in_dim = patches.shape
    d = view.hidden_size
    if params.kernel.shape != (in_dim, d):
        raise DimensionError(f"embedding kernel {params.kernel.shape} does not match tubelet size {in_dim} -> {d}")
    if params.pos.shape != (n_t, n_s + 1, d):
        raise DimensionError(f"positional table {params.pos.shape} does not match token grid {(n_t, n_s + 1, d)}")
    emb = tn.linear(patches, params.kernel, params.bias)
    cls = tn.broadcast_to(tn.reshape(params.cls, (1, 1, 1, d)), (B, n_t, 1, d))
    tokens = tn.concat([cls, emb], axis=2) + params.pos
    grid = token_grid(x.shape[1:], view.tubelet)
    return TokenSet(tokens, view_index, grid)


def tokenize_multiview(clip, views: Sequence[ViewSpec], params: Sequence[EmbeddingParams]) -> list[TokenSet]:
    """Tokenize every view; views must be ordered by increasing token count."""
    if len(views) != len(params):
        raise ContractError(f"{len(views)} views but {len(params)} embedding parameter sets")
    shape = tn.as_tensor(clip).shape
    counts = [count_tokens(shape[-4:], v.tubelet) for v in views]
    if counts != sorted(counts):
        raise ContractError(f"views must be ordered by increasing token count, got {counts}")
    return [tokenize_view(clip, v, p, i) for i, (v, p) in enumerate(zip(views, params))]

