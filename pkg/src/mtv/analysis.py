"""Closed-form parameter and compute accounting.

Compute is counted in multiply-accumulates (MACs) of the matrix products the
forward pass performs: tubelet embedding, attention projections, attention
scores and weighted sums, MLPs, fusion modules, the global encoder and the
classifier.  Normalisation, softmax, GeLU and additions are not counted.
``flops`` reports ``2 * MACs`` by default; ``flop_convention="mac"`` reports
one op per MAC, which is the convention of the reference cost tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import FACTORIZED, MTVConfig, preset_slug
from .fusion import fusion_param_count, fusion_positions

FLOPS_PER_MAC = {"2-per-mac": 2, "mac": 1}


@dataclass
class CostEntry:
    params: int = 0
    macs: int = 0
    tokens: int = 0


@dataclass
class CostReport:
    breakdown: dict[str, CostEntry] = field(default_factory=dict)
    flop_convention: str = "2-per-mac"

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.breakdown.values())

    @property
    def total_macs(self) -> int:
        return sum(e.macs for e in self.breakdown.values())

    @property
    def total_flops(self) -> int:
        return self.total_macs * FLOPS_PER_MAC[self.flop_convention]

    def flops_of(self, key: str) -> int:
        return self.breakdown[key].macs * FLOPS_PER_MAC[self.flop_convention]

    def with_convention(self, convention: str) -> "CostReport":
        if convention not in FLOPS_PER_MAC:
            raise ValueError(f"unknown flop convention {convention!r}")
        return CostReport(dict(self.breakdown), convention)

    def records(self) -> list[dict]:
        """Machine-readable rows, one per component plus a total."""
        rows = [
            {"component": k, "params": e.params, "flops": e.macs * FLOPS_PER_MAC[self.flop_convention], "tokens": e.tokens}
            for k, e in self.breakdown.items()
        ]
        rows.append(
            {"component": "total", "params": self.total_params, "flops": self.total_flops, "tokens": ""}
        )
        return rows

    def to_text(self) -> str:
        lines = [f"{'component':<24}{'tokens':>8}{'MParams':>12}{'GFLOPs':>12}"]
        for row in self.records():
            lines.append(
                f"{row['component']:<24}{row['tokens']!s:>8}{row['params'] / 1e6:>12.3f}{row['flops'] / 1e9:>12.3f}"
            )
        lines.append(f"flop convention: {self.flop_convention}")
        return "\n".join(lines)


def _layer_params(d: int, mlp: int) -> int:
    # q, k, v, out projections with biases, two norms, two-layer MLP
    return 4 * (d * d + d) + 4 * d + d * mlp + mlp + mlp * d + d


def _layer_macs(tokens: int, groups: int, d: int, mlp: int) -> int:
    s = tokens // groups
    return 4 * tokens * d * d + 2 * tokens * d * mlp + 2 * groups * s * s * d


def _view_stats(config: MTVConfig, j: int) -> tuple[int, int, int, int]:
    """(n_t, tokens per slice incl. class token, total tokens, attention groups)."""
    n_t, gh, gw = config.grids()[j]
    m = gh * gw + 1
    groups = n_t if config.views[j].encoder.attention_scope == FACTORIZED else 1
    return n_t, m, n_t * m, groups


def count_params(config: MTVConfig) -> CostReport:
    return _count(config)


def count_flops(config: MTVConfig, clip_shape=None, flop_convention: str = "2-per-mac") -> CostReport:
    """Cost of one forward pass on one clip (``clip_shape`` overrides the config's)."""
    if clip_shape is not None and tuple(clip_shape) != config.clip_shape:
        import dataclasses

        config = dataclasses.replace(config, clip_shape=tuple(clip_shape))
    return _count(config).with_convention(flop_convention)


def _count(config: MTVConfig) -> CostReport:
    rep = CostReport()
    C = config.clip_shape[3]
    V = config.num_views
    for j, v in enumerate(config.views):
        d, mlp, L = v.hidden_size, v.encoder.mlp_dim, v.encoder.num_layers
        tb = v.tubelet
        n_t, m, M, G = _view_stats(config, j)
        patch = tb.t * tb.h * tb.w * C
        n_patches = n_t * (m - 1)
        rep.breakdown[f"view{j}.embed"] = CostEntry(
            params=patch * d + d + d + n_t * m * d, macs=n_patches * patch * d, tokens=n_patches
        )
        rep.breakdown[f"view{j}.encoder"] = CostEntry(
            params=L * _layer_params(d, mlp), macs=L * _layer_macs(M, G, d, mlp), tokens=M
        )

    f = config.fusion
    if f.active and V > 1:
        macs = 0
        for _ in fusion_positions(config):
            for i in range(V - 1):
                macs += _pair_macs(config, i)
            if f.method == "bottleneck":
                macs += _bottleneck_own_macs(config)
        rep.breakdown["fusion"] = CostEntry(params=fusion_param_count(config), macs=macs)

    g = config.global_encoder
    dims = [v.hidden_size for v in config.views]
    if g.kind == "transformer":
        D = g.hidden_size
        n = V + 1
        params = sum(dj * D + D for dj in dims) + 2 * D
        macs = sum(dims) * D
        if g.num_layers:
            params += D + g.num_layers * _layer_params(D, g.mlp_dim)
            macs += g.num_layers * _layer_macs(n, 1, D, g.mlp_dim)
        rep.breakdown["global"] = CostEntry(params=params, macs=macs, tokens=n if g.num_layers else V)
        head_in = D
    else:
        rep.breakdown["global"] = CostEntry(
            params=sum(dims) * g.mlp_dim + g.mlp_dim, macs=sum(dims) * g.mlp_dim, tokens=V
        )
        head_in = g.mlp_dim
    rep.breakdown["head"] = CostEntry(
        params=head_in * config.num_classes + config.num_classes, macs=head_in * config.num_classes
    )
    return rep


def _pair_macs(config: MTVConfig, i: int) -> int:
    """MACs of one fusion pair (view i + 1 into view i) at one fusion layer."""
    f = config.fusion
    dc, df = config.views[i].hidden_size, config.views[i + 1].hidden_size
    n_tc, mc, Mc, Gc = _view_stats(config, i)
    n_tf, mf, Mf, Gf = _view_stats(config, i + 1)
    if f.method == "cva":
        keys = Mf if f.cva_scope == "global" else Mf // n_tc
        return Mf * df * dc + Mc * dc * dc + 2 * Mf * dc * dc + 2 * Mc * keys * dc
    if f.method == "mlp":
        return Mc * df * config.views[i].encoder.mlp_dim
    # bottleneck: injected rows into view i and the joint attention of its tokens
    nb = f.bottleneck_tokens
    inj = nb if (Gf == Gc or Gf == 1) else nb * (Gf // Gc)
    s = Mc // Gc
    return Gc * inj * df * dc + 2 * Gc * inj * dc * dc + 2 * Gc * s * (s + inj) * dc


def _bottleneck_own_macs(config: MTVConfig) -> int:
    """Bottleneck rows processed inside every view that owns them (views 1..V-1)."""
    nb = config.fusion.bottleneck_tokens
    V = config.num_views
    total = 0
    for j in range(1, V):
        d, mlp = config.views[j].hidden_size, config.views[j].encoder.mlp_dim
        _, _, M, G = _view_stats(config, j)
        s = M // G
        inj = 0
        if j < V - 1:
            _, _, _, Gn = _view_stats(config, j + 1)
            inj = nb if (Gn == G or Gn == 1) else nb * (Gn // G)
        rows = G * nb
        total += 4 * rows * d * d + 2 * rows * d * mlp + 2 * rows * (s + nb + inj) * d
    return total


# ---------------------------------------------------------------------------
# reference values: slug -> (GFLOPs, MParams)

REFERENCE: dict[str, tuple[float, float | None]] = {
    # view assignment ablation
    "b8-ti2": (81, 161),
    "b2-ti8": (337, 221),
    "b8-s4-ti2": (202, 250),
    "b2-s4-ti8": (384, 310),
    "b4-s8-ti16": (195, 314),
    # same backbone on every view
    "b4-b8-b16": (324, 759),
    "b2-b8": (448, 465),
    "b2-b4-b8": (637, 751),
    # single views and fusion methods
    "b4": (145, 173),
    "s8": (20, 60),
    "ti16": (3, 13),
    "b4-s8-ti16-late": (187, 306),
    "b4-s8-ti16-mlp": (202, 323),
    "b4-s8-ti16-bottleneck": (188, 306),
    "b4-s8-ti16-cva": (195, 314),
    # number of views
    "b4-ti16": (168, 224),
}


@dataclass
class Deviation:
    name: str
    reference: float
    measured: float

    @property
    def relative(self) -> float:
        return (self.measured - self.reference) / self.reference

    def within(self, band: float) -> bool:
        return abs(self.relative) <= band


def compare_table(
    report: CostReport,
    reference: tuple[float, float | None] | str,
    convention: str = "mac",
) -> dict[str, Deviation]:
    """Relative deviation of a report from reference GFLOPs / MParams.

    ``reference`` is a preset name or an explicit ``(GFLOPs, MParams)`` pair.
    GFLOPs are compared under ``convention`` (one op per MAC by default).
    """
    if isinstance(reference, str):
        key = preset_slug(reference)
        if key not in REFERENCE:
            raise KeyError(f"no reference values for {reference!r}")
        reference = REFERENCE[key]
    gflops, mparams = reference
    out = {"gflops": Deviation("gflops", gflops, report.with_convention(convention).total_flops / 1e9)}
    if mparams is not None:
        out["mparams"] = Deviation("mparams", mparams, report.total_params / 1e6)
    return out


def format_deviations(devs: dict[str, Deviation]) -> str:
    return "\n".join(
        f"{d.name:<8} reference {d.reference:>8.1f}  measured {d.measured:>8.1f}  deviation {d.relative:+.1%}"
        for d in devs.values()
    )
