"""Model configuration: tubelets, per-view encoders, fusion and presets.

Backbone sizes follow the standard ViT family (Tiny to Huge).  A multiview
variant is written the way the ablations name them, e.g. ``B/2+S/4+Ti/8``:
a Base encoder on 16x16x2 tubelets, Small on 16x16x4 and Tiny on 16x16x8.
Views are always stored coarse-to-fine, i.e. by increasing token count.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

FACTORIZED = "factorized"
UNFACTORIZED = "unfactorized"
FUSION_METHODS = ("none", "cva", "bottleneck", "mlp")
# std0.02: truncated normal with std 0.02; fan_in: std 1 / sqrt(fan_in)
INIT_SCHEMES = ("std0.02", "fan_in")


@dataclass(frozen=True)
class TubeletSpec:
    t: int
    h: int = 16
    w: int = 16

    def __post_init__(self):
        for name in ("t", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"tubelet.{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_size: int
    mlp_dim: int
    num_heads: int
    attention_scope: str = FACTORIZED
    droplayer_rate: float = 0.0

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.hidden_size < 1 or self.mlp_dim < 1 or self.num_heads < 1:
            raise ConfigError("hidden_size, mlp_dim and num_heads must be positive")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        if self.attention_scope not in (FACTORIZED, UNFACTORIZED):
            raise ConfigError(f"unknown attention_scope {self.attention_scope!r}")
        if not 0.0 <= self.droplayer_rate < 1.0:
            raise ConfigError(f"droplayer_rate must be in [0, 1), got {self.droplayer_rate}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


# name: (hidden, mlp, heads, layers, spatial tubelet)
BACKBONES: dict[str, tuple[int, int, int, int, int]] = {
    "Ti": (192, 768, 3, 12, 16),
    "S": (384, 1536, 6, 12, 16),
    "B": (768, 3072, 12, 12, 16),
    "L": (1024, 4096, 16, 24, 16),
    "H": (1280, 5120, 16, 32, 14),
}


def backbone(name: str, **overrides) -> EncoderConfig:
    try:
        hidden, mlp, heads, layers, _ = BACKBONES[name]
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}; expected one of {sorted(BACKBONES)}") from None
    kwargs = dict(num_layers=layers, hidden_size=hidden, mlp_dim=mlp, num_heads=heads)
    kwargs.update(overrides)
    return EncoderConfig(**kwargs)


@dataclass(frozen=True)
class ViewSpec:
    tubelet: TubeletSpec
    encoder: EncoderConfig
    name: str = ""

    @property
    def hidden_size(self) -> int:
        return self.encoder.hidden_size


def token_grid(clip_shape, tubelet: TubeletSpec) -> tuple[int, int, int]:
    """Temporal slices and spatial grid ``(n_t, rows, cols)`` for one view."""
    T, H, W = clip_shape[:3]
    return T // tubelet.t, H // tubelet.h, W // tubelet.w


@dataclass(frozen=True)
class FusionSpec:
    method: str = "none"
    layers: tuple[int, ...] = ()
    bottleneck_tokens: int = 1
    cva_scope: str = "local"
    mlp_zero_init: bool = False

    def __post_init__(self):
        if self.method not in FUSION_METHODS:
            raise ConfigError(f"unknown fusion method {self.method!r}; expected one of {FUSION_METHODS}")
        object.__setattr__(self, "layers", tuple(sorted(int(l) for l in self.layers)))
        if any(l < 0 for l in self.layers):
            raise ConfigError(f"fusion layers must be >= 0, got {self.layers}")
        if self.bottleneck_tokens < 1:
            raise ConfigError("bottleneck_tokens must be >= 1")
        if self.cva_scope not in ("local", "global"):
            raise ConfigError(f"unknown cva_scope {self.cva_scope!r}")

    @property
    def active(self) -> bool:
        return self.method != "none" and bool(self.layers)


@dataclass(frozen=True)
class GlobalConfig:
    kind: str = "transformer"
    num_layers: int = 1
    hidden_size: int = 768
    mlp_dim: int = 3072
    num_heads: int = 8

    def __post_init__(self):
        if self.kind not in ("transformer", "mlp"):
            raise ConfigError(f"unknown global encoder kind {self.kind!r}")
        if self.num_layers < 0 or self.hidden_size < 1 or self.mlp_dim < 1 or self.num_heads < 1:
            raise ConfigError("invalid global encoder dimensions")
        if self.kind == "transformer" and self.hidden_size % self.num_heads:
            raise ConfigError(
                f"global hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )


@dataclass(frozen=True)
class MTVConfig:
    clip_shape: tuple[int, int, int, int]
    views: tuple[ViewSpec, ...]
    fusion: FusionSpec = field(default_factory=FusionSpec)
    global_encoder: GlobalConfig = field(default_factory=GlobalConfig)
    num_classes: int = 400
    seed: int = 0
    name: str = ""
    init_scheme: str = "std0.02"

    def __post_init__(self):
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init_scheme {self.init_scheme!r}; expected one of {INIT_SCHEMES}")
        object.__setattr__(self, "clip_shape", tuple(int(s) for s in self.clip_shape))
        object.__setattr__(self, "views", tuple(self.views))
        if len(self.clip_shape) != 4 or min(self.clip_shape) < 1:
            raise ConfigError(f"clip_shape must be (T, H, W, C) with positive extents, got {self.clip_shape}")
        if not self.views:
            raise ConfigError("at least one view is required")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        counts = []
        for i, v in enumerate(self.views):
            n_t, gh, gw = token_grid(self.clip_shape, v.tubelet)
            if n_t < 1 or gh < 1 or gw < 1:
                raise ConfigError(f"view {i} tubelet {v.tubelet} exceeds clip {self.clip_shape}")
            counts.append(n_t * gh * gw)
        if counts != sorted(counts):
            raise ConfigError(f"views must be ordered by increasing token count, got {counts}")
        if self.fusion.active:
            deepest = max(v.encoder.num_layers for v in self.views)
            if min(v.encoder.num_layers for v in self.views) < 1:
                raise ConfigError("fusion needs every view to have at least one layer")
            if self.fusion.layers[-1] >= deepest:
                raise ConfigError(f"fusion layer {self.fusion.layers[-1]} beyond depth {deepest}")

    @property
    def num_views(self) -> int:
        return len(self.views)

    def grids(self) -> list[tuple[int, int, int]]:
        return [token_grid(self.clip_shape, v.tubelet) for v in self.views]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MTVConfig":
        d = _strict(d, cls, "model")
        views = []
        for i, v in enumerate(d.get("views", ())):
            v = _strict(v, ViewSpec, f"model.views[{i}]")
            views.append(
                ViewSpec(
                    tubelet=TubeletSpec(**_strict(v["tubelet"], TubeletSpec, f"model.views[{i}].tubelet")),
                    encoder=EncoderConfig(**_strict(v["encoder"], EncoderConfig, f"model.views[{i}].encoder")),
                    name=v.get("name", ""),
                )
            )
        kwargs = {k: d[k] for k in ("clip_shape", "num_classes", "seed", "name", "init_scheme") if k in d}
        if "fusion" in d:
            fd = _strict(d["fusion"], FusionSpec, "model.fusion")
            if "layers" in fd:
                fd["layers"] = tuple(fd["layers"])
            kwargs["fusion"] = FusionSpec(**fd)
        if "global_encoder" in d:
            kwargs["global_encoder"] = GlobalConfig(**_strict(d["global_encoder"], GlobalConfig, "model.global_encoder"))
        return cls(views=tuple(views), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "MTVConfig":
        return cls.from_dict(json.loads(text))


def _strict(d: Any, cls, where: str) -> dict[str, Any]:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r}")
    return dict(d)


# ---------------------------------------------------------------------------
# variants and presets

_VIEW_RE = re.compile(r"^(Ti|S|B|L|H)/(\d+)(?:\((\d+)\))?$")

REFERENCE_CLIP = (32, 224, 224, 3)


def default_fusion_layers(deepest: int) -> tuple[int, ...]:
    """Mid and late fusion: (5, 11) for 12 layers, (11, 23) for 24, (11, 23, 31) for 32."""
    return {12: (5, 11), 24: (11, 23), 32: (11, 23, 31)}.get(deepest, (deepest // 2 - 1, deepest - 1))


def parse_variant(
    notation: str,
    clip_shape=REFERENCE_CLIP,
    fusion_method: str = "cva",
    fusion_layers: tuple[int, ...] | None = None,
    num_classes: int = 400,
    global_encoder: GlobalConfig | None = None,
    name: str = "",
) -> MTVConfig:
    """Build a config from notation like ``B/2+S/4+Ti/8`` (``B/4(14)`` sets depth 14)."""
    views = []
    for part in notation.replace(" ", "").split("+"):
        m = _VIEW_RE.match(part)
        if not m:
            raise ConfigError(f"cannot parse view {part!r} in {notation!r}")
        size, t, depth = m.group(1), int(m.group(2)), m.group(3)
        spatial = BACKBONES[size][4]
        enc = backbone(size, **({"num_layers": int(depth)} if depth else {}))
        views.append(ViewSpec(TubeletSpec(t, spatial, spatial), enc, name=part))
    views.sort(key=lambda v: _count(clip_shape, v.tubelet))
    if len(views) == 1:
        fusion = FusionSpec()
    else:
        deepest = max(v.encoder.num_layers for v in views)
        layers = default_fusion_layers(deepest) if fusion_layers is None else fusion_layers
        fusion = FusionSpec(method=fusion_method, layers=tuple(layers))
    if global_encoder is None and len(views) == 1:
        # single view: a temporal encoder of the same backbone size
        e = views[0].encoder
        global_encoder = GlobalConfig(
            num_layers=e.num_layers, hidden_size=e.hidden_size, mlp_dim=e.mlp_dim, num_heads=e.num_heads
        )
    elif global_encoder is None:
        # Base-sized global encoder with 8 heads
        global_encoder = GlobalConfig(num_layers=12, hidden_size=768, mlp_dim=3072, num_heads=8)
    return MTVConfig(
        clip_shape=tuple(clip_shape),
        views=tuple(views),
        fusion=fusion,
        global_encoder=global_encoder,
        num_classes=num_classes,
        name=name or notation,
    )


def _count(clip_shape, tubelet: TubeletSpec) -> int:
    n_t, gh, gw = token_grid(clip_shape, tubelet)
    return n_t * gh * gw


# slug -> (notation, fusion method, fusion layers or None for the default)
PRESETS: dict[str, tuple[str, str, tuple[int, ...] | None]] = {
    "b2": ("B/2", "none", None),
    "b4": ("B/4", "none", None),
    "s8": ("S/8", "none", None),
    "ti8": ("Ti/8", "none", None),
    "ti16": ("Ti/16", "none", None),
    "b2-ti8": ("B/2+Ti/8", "cva", None),
    "b8-ti2": ("B/8+Ti/2", "cva", None),
    "b4-ti16": ("B/4+Ti/16", "cva", None),
    "b2-b8": ("B/2+B/8", "cva", None),
    "b2-s4-ti8": ("B/2+S/4+Ti/8", "cva", None),
    "b8-s4-ti2": ("B/8+S/4+Ti/2", "cva", None),
    "b4-s8-ti16": ("B/4+S/8+Ti/16", "cva", None),
    "b4-b8-b16": ("B/4+B/8+B/16", "cva", None),
    "b2-b4-b8": ("B/2+B/4+B/8", "cva", None),
    "b4-s8-ti16-late": ("B/4+S/8+Ti/16", "none", ()),
    "b4-s8-ti16-mlp": ("B/4+S/8+Ti/16", "mlp", None),
    "b4-s8-ti16-bottleneck": ("B/4+S/8+Ti/16", "bottleneck", None),
    "b4-s8-ti16-cva": ("B/4+S/8+Ti/16", "cva", None),
    "l2-b4-s8-ti16": ("L/2+B/4+S/8+Ti/16", "cva", None),
    "h2-b4-s8-ti16": ("H/2+B/4+S/8+Ti/16", "cva", None),
}

ALIASES = {
    "mtv-b": "b2-s4-ti8",
    "mtv-b-2s4ti8": "b2-s4-ti8",
    "mtv-l": "l2-b4-s8-ti16",
    "mtv-h": "h2-b4-s8-ti16",
}


def preset_slug(name: str) -> str:
    """Normalise a preset name or variant notation such as ``B/2+Ti/8`` to its slug."""
    key = name.strip()
    if "/" in key:
        key = "-".join(p.replace("/", "").lower() for p in key.split("+"))
    key = key.lower()
    return ALIASES.get(key, key)


def preset(name: str, clip_shape=REFERENCE_CLIP, num_classes: int = 400) -> MTVConfig:
    slug = preset_slug(name)
    if slug not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    notation, method, layers = PRESETS[slug]
    return parse_variant(
        notation,
        clip_shape=clip_shape,
        fusion_method=method,
        fusion_layers=layers,
        num_classes=num_classes,
        name=slug,
    )


def toy_variant(
    tubelets: tuple[int, ...],
    widths: tuple[int, ...],
    clip_shape=(16, 32, 32, 1),
    num_layers: int = 2,
    spatial: int = 16,
    heads: int = 2,
    fusion_method: str = "cva",
    fusion_layers: tuple[int, ...] | None = None,
    num_classes: int = 16,
    global_width: int = 32,
    seed: int = 0,
    init_scheme: str = "fan_in",
) -> MTVConfig:
    """Desk-scale model: one view per temporal tubelet size, MLP ratio 4."""
    views = [
        ViewSpec(TubeletSpec(t, spatial, spatial), EncoderConfig(num_layers, d, 4 * d, heads), name=f"toy/{t}")
        for t, d in zip(tubelets, widths)
    ]
    views.sort(key=lambda v: _count(clip_shape, v.tubelet))
    if len(views) > 1:
        layers = (num_layers - 1,) if fusion_layers is None else fusion_layers
        fusion = FusionSpec(fusion_method, layers)
    else:
        fusion = FusionSpec()
    return MTVConfig(
        clip_shape=tuple(clip_shape),
        views=tuple(views),
        fusion=fusion,
        global_encoder=GlobalConfig(num_layers=1, hidden_size=global_width, mlp_dim=4 * global_width, num_heads=heads),
        num_classes=num_classes,
        seed=seed,
        init_scheme=init_scheme,
    )
