"""Multiview model: per-view encoders, lateral fusion and a global encoder.

Parameters live in nested dataclasses; :func:`named_parameters` flattens
them into dotted names such as ``views.1.layers.3.attn.wq``, which is also
the order used by the optimizer and by checkpoints.
"""

from __future__ import annotations

import dataclasses
import io
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as tn
from .config import MTVConfig
from .encoder import (
    AttentionParams,
    LayerParams,
    droplayer_rates,
    droplayer_scale,
    encoder_layer,
    pool_view_cls,
)
from .fileio import atomic_write
from .errors import CheckpointError, ContractError, DimensionError
from .fusion import (
    BottleneckParams,
    CVAParams,
    MLPFusionParams,
    PairParams,
    run_multiview,
    validate_fusion,
)
from .tensor import Tensor
from .tokenizer import EmbeddingParams, tokenize_multiview

INIT_STD = 0.02


@dataclass
class ViewParams:
    embed: EmbeddingParams
    layers: list[LayerParams]


@dataclass
class GlobalParams:
    view_proj_w: list[Tensor] = field(default_factory=list)
    view_proj_b: list[Tensor] = field(default_factory=list)
    cls: Tensor | None = None
    layers: list[LayerParams] = field(default_factory=list)
    norm_scale: Tensor | None = None
    norm_bias: Tensor | None = None
    mlp_w: Tensor | None = None
    mlp_b: Tensor | None = None


@dataclass
class ModelParams:
    config: MTVConfig
    views: list[ViewParams]
    fusion: list[list[PairParams]]
    global_: GlobalParams
    head_w: Tensor
    head_b: Tensor


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted name, tensor)`` for every parameter in a fixed order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            if f.name == "config":
                continue
            value = getattr(obj, f.name)
            if value is None:
                continue
            name = f.name.rstrip("_")
            yield from named_parameters(value, f"{prefix}.{name}" if prefix else name)


def parameters(params: ModelParams) -> list[Tensor]:
    return [t for _, t in named_parameters(params)]


def num_parameters(params: ModelParams) -> int:
    return sum(t.size for t in parameters(params))


# ---------------------------------------------------------------------------
# initialisation


class _Init:
    def __init__(self, seed, dtype, scheme: str = "std0.02", shapes_only: bool = False):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.scheme = scheme
        self.shapes_only = shapes_only

    def _placeholder(self, shape) -> Tensor:
        # zero-stride view: the right shape at no memory cost
        return tn.parameter(np.broadcast_to(np.zeros((), dtype=self.dtype), shape), dtype=self.dtype)

    def normal(self, *shape) -> Tensor:
        """Truncated normal at two standard deviations.

        Matrices use std ``1 / sqrt(fan_in)`` under the ``fan_in`` scheme;
        vectors (class and bottleneck tokens) always use the base std.
        """
        if self.shapes_only:
            return self._placeholder(shape)
        x = self.rng.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        std = INIT_STD
        if self.scheme == "fan_in" and len(shape) == 2 and shape[0] > 1:
            std = 1.0 / np.sqrt(shape[0])
        return tn.parameter(x * std, dtype=self.dtype)

    def base(self, *shape) -> Tensor:
        """Base std under every scheme (learned tokens, classifier head)."""
        scheme, self.scheme = self.scheme, "std0.02"
        try:
            return self.normal(*shape)
        finally:
            self.scheme = scheme

    def zeros(self, *shape) -> Tensor:
        if self.shapes_only:
            return self._placeholder(shape)
        return tn.parameter(np.zeros(shape), dtype=self.dtype)

    def ones(self, *shape) -> Tensor:
        if self.shapes_only:
            return self._placeholder(shape)
        return tn.parameter(np.ones(shape), dtype=self.dtype)

    def attention(self, d: int) -> AttentionParams:
        return AttentionParams(
            self.normal(d, d), self.zeros(d),
            self.normal(d, d), self.zeros(d),
            self.normal(d, d), self.zeros(d),
            self.normal(d, d), self.zeros(d),
        )  # fmt: skip

    def layer(self, d: int, mlp_dim: int) -> LayerParams:
        return LayerParams(
            ln1_scale=self.ones(d),
            ln1_bias=self.zeros(d),
            attn=self.attention(d),
            ln2_scale=self.ones(d),
            ln2_bias=self.zeros(d),
            mlp_w1=self.normal(d, mlp_dim),
            mlp_b1=self.zeros(mlp_dim),
            mlp_w2=self.normal(mlp_dim, d),
            mlp_b2=self.zeros(d),
        )


def build_model(config: MTVConfig, seed: int | None = None, dtype=None, shapes_only: bool = False) -> ModelParams:
    """Instantiate parameters deterministically from ``seed`` (default ``config.seed``).

    ``shapes_only`` backs every parameter with a read-only zero-stride array:
    the structure is complete (for counting and naming) but costs no memory
    and cannot be trained.
    """
    validate_fusion(config)
    dtype = dtype or tn.get_default_dtype()
    seed = config.seed if seed is None else seed
    init = _Init(seed, dtype, config.init_scheme, shapes_only)
    # separate stream so fused and unfused models share every other parameter
    finit = _Init(np.random.SeedSequence([seed, 1]), dtype, config.init_scheme, shapes_only)
    C = config.clip_shape[3]
    views = []
    for v, (n_t, gh, gw) in zip(config.views, config.grids()):
        d = v.hidden_size
        tb = v.tubelet
        embed = EmbeddingParams(
            kernel=init.normal(tb.t * tb.h * tb.w * C, d),
            bias=init.zeros(d),
            cls=init.normal(d),
            pos=init.zeros(n_t, gh * gw + 1, d),
        )
        layers = [init.layer(d, v.encoder.mlp_dim) for _ in range(v.encoder.num_layers)]
        views.append(ViewParams(embed, layers))

    fusion: list[list[PairParams]] = []
    f = config.fusion
    if f.active and config.num_views > 1:
        init, base = finit, init
        for _ in f.layers:
            pairs: list[PairParams] = []
            for i in range(config.num_views - 1):
                dc, df = config.views[i].hidden_size, config.views[i + 1].hidden_size
                if f.method == "cva":
                    pairs.append(
                        CVAParams(
                            proj_w=init.normal(df, dc), proj_b=init.zeros(dc),
                            wq=init.normal(dc, dc), bq=init.zeros(dc),
                            wk=init.normal(dc, dc), bk=init.zeros(dc),
                            wv=init.zeros(dc, dc), bv=init.zeros(dc),
                        )  # fmt: skip
                    )
                elif f.method == "bottleneck":
                    pairs.append(
                        BottleneckParams(
                            tokens=init.base(f.bottleneck_tokens, df),
                            proj_w=init.normal(df, dc),
                            proj_b=init.zeros(dc),
                            gate=init.zeros(1),
                        )
                    )
                else:
                    mlp_c = config.views[i].encoder.mlp_dim
                    w = init.zeros(df, mlp_c) if f.mlp_zero_init else init.normal(df, mlp_c)
                    pairs.append(MLPFusionParams(w))
            fusion.append(pairs)
        init = base

    g = config.global_encoder
    gp = GlobalParams()
    if g.kind == "transformer":
        D = g.hidden_size
        for v in config.views:
            gp.view_proj_w.append(init.normal(v.hidden_size, D))
            gp.view_proj_b.append(init.zeros(D))
        if g.num_layers > 0:
            gp.cls = init.normal(D)
        gp.layers = [init.layer(D, g.mlp_dim) for _ in range(g.num_layers)]
        gp.norm_scale = init.ones(D)
        gp.norm_bias = init.zeros(D)
        head_in = D
    else:
        total = sum(v.hidden_size for v in config.views)
        gp.mlp_w = init.normal(total, g.mlp_dim)
        gp.mlp_b = init.zeros(g.mlp_dim)
        head_in = g.mlp_dim
    # a small head keeps the initial prediction close to uniform
    head_w = init.base(head_in, config.num_classes)
    head_b = init.zeros(config.num_classes)
    return ModelParams(config, views, fusion, gp, head_w, head_b)


# ---------------------------------------------------------------------------
# forward


def _global_config_as_encoder(config: MTVConfig):
    from .config import EncoderConfig

    g = config.global_encoder
    return EncoderConfig(g.num_layers, g.hidden_size, g.mlp_dim, g.num_heads)


def global_encode(params: ModelParams, pooled: Sequence[Tensor]) -> Tensor:
    """Map per-view pooled class tokens ``[B, d_j]`` to logits ``[B, classes]``."""
    config = params.config
    g = config.global_encoder
    gp = params.global_
    if g.kind == "mlp":
        h = tn.gelu(tn.linear(tn.concat(list(pooled), axis=-1), gp.mlp_w, gp.mlp_b))
        return tn.linear(h, params.head_w, params.head_b)
    B = pooled[0].shape[0]
    D = g.hidden_size
    proj = [
        tn.reshape(tn.linear(c, w, b), (B, 1, D))
        for c, w, b in zip(pooled, gp.view_proj_w, gp.view_proj_b)
    ]
    if g.num_layers == 0:
        # no global layers: read out the mean projected view token
        z = tn.mean(tn.concat(proj, axis=1), axis=1)
    else:
        cls = tn.broadcast_to(tn.reshape(gp.cls, (1, 1, D)), (B, 1, D))
        z = tn.concat([cls] + proj, axis=1)
        enc = _global_config_as_encoder(config)
        for layer in gp.layers:
            z = encoder_layer(z, layer, enc)
        z = tn.take(z, (slice(None), 0))
    z = tn.layer_norm(z, gp.norm_scale, gp.norm_bias)
    return tn.linear(z, params.head_w, params.head_b)


def draw_droplayer(params: ModelParams, rng: np.random.Generator, batch: int) -> list[list[np.ndarray | None]]:
    return [
        [droplayer_scale(rng, float(r), batch) for r in droplayer_rates(v.encoder)]
        for v in params.config.views
    ]


def forward(
    params: ModelParams,
    clip,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_tokens: bool = False,
):
    """Logits for one clip ``[T, H, W, C]`` (``[classes]``) or a batch (``[B, classes]``).

    ``training`` enables droplayer, which needs ``rng``.
    """
    config = params.config
    x = tn.as_tensor(clip)
    single = x.ndim == 4
    if single:
        x = tn.reshape(x, (1,) + x.shape)
    if x.ndim != 5 or tuple(x.shape[1:]) != config.clip_shape:
        raise DimensionError(f"clip shape {tuple(x.shape)} does not match model clip {config.clip_shape}")
    scales = None
    if training and any(v.encoder.droplayer_rate > 0 for v in config.views):
        if rng is None:
            raise ContractError("droplayer during training needs an rng")
        scales = draw_droplayer(params, rng, x.shape[0])
    tokens = tokenize_multiview(x, config.views, [v.embed for v in params.views])
    tokens = run_multiview(tokens, config, [v.layers for v in params.views], params.fusion, scales)
    logits = global_encode(params, [pool_view_cls(t) for t in tokens])
    if single:
        logits = tn.reshape(logits, logits.shape[1:])
    if return_tokens:
        return logits, tokens
    return logits


def make_crops(clip: np.ndarray, target: Sequence[int], temporal: int = 1, spatial: int = 1) -> list[np.ndarray]:
    """Evenly spaced ``temporal x spatial`` crops of ``target`` size.

    Spatial crops slide along the longer spatial axis and are centred on the
    other one.
    """
    T, H, W = clip.shape[:3]
    tt, th, tw = target[:3]
    if tt > T or th > H or tw > W:
        raise DimensionError(f"crop {tuple(target[:3])} larger than clip {clip.shape[:3]}")

    def starts(n, full, size):
        if n == 1:
            return [(full - size) // 2]
        return [round(i * (full - size) / (n - 1)) for i in range(n)]

    t0s = starts(temporal, T, tt) if temporal > 1 else [0 if T == tt else (T - tt) // 2]
    crops = []
    for t0 in t0s:
        if W >= H:
            offsets = [((H - th) // 2, x0) for x0 in starts(spatial, W, tw)]
        else:
            offsets = [(y0, (W - tw) // 2) for y0 in starts(spatial, H, th)]
        for y0, x0 in offsets:
            crops.append(clip[t0 : t0 + tt, y0 : y0 + th, x0 : x0 + tw])
    return crops


def multi_crop_inference(params: ModelParams, crops: Sequence) -> np.ndarray:
    """Average softmax probabilities over crops of one clip."""
    if not crops:
        raise ContractError("no crops given")
    with tn.no_grad():
        batch = np.stack([np.asarray(tn.as_tensor(c).data) for c in crops])
        probs = tn.softmax(forward(params, batch), axis=-1).data
    return probs.mean(axis=0)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   magic b"MTVCKPT1", u32 version, u64 config length, config JSON,
#   u32 tensor count, then per tensor:
#   u16 name length, name, u8 dtype (4 = float32, 8 = float64),
#   u8 ndim, u64 dims..., raw data

MAGIC = b"MTVCKPT1"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    """Write parameters atomically (temporary file, then rename)."""
    buf = io.BytesIO()
    cfg = params.config.to_json().encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(cfg)))
    buf.write(cfg)
    named = list(named_parameters(params))
    buf.write(struct.pack("<I", len(named)))
    for name, t in named:
        data = np.ascontiguousarray(t.data)
        code = data.dtype.itemsize
        if code not in _DTYPES or data.dtype.kind != "f":
            raise CheckpointError(f"unsupported dtype {data.dtype} for {name}")
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, data.ndim))
        buf.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        buf.write(data.astype(_DTYPES[code], copy=False).tobytes())
    atomic_write(path, buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | os.PathLike, config: MTVConfig | None = None) -> ModelParams:
    """Read a checkpoint; if ``config`` is given it must match the stored one."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        stored = MTVConfig.from_json(r.take(cfg_len).decode())
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config: {exc}") from exc
    if config is not None and config.to_json() != stored.to_json():
        raise CheckpointError(f"{path}: checkpoint config does not match the requested model")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * code
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=_DTYPES[code]).reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    dtype = next(iter(tensors.values())).dtype if tensors else None
    params = build_model(stored, dtype=dtype)
    expected = dict(named_parameters(params))
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(expected))[:3]
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, t in expected.items():
        if t.shape != tensors[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {t.shape}")
        t.data = tensors[name].astype(t.data.dtype, copy=False)
    return params

