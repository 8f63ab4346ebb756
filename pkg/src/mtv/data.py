"""Synthetic two-factor video classification data.

Every clip is the sum of

* a slow component: one of ``S`` static smooth textures, present in every
  frame, and
* a fast component: one of ``F`` oriented gratings flickering with a short
  period.  Each period is a zero-mean cycle (``+1, -1`` for period 2,
  ``+1, +1, -1, -1`` for period 4) whose polarity and spatial phase are
  drawn per cycle, so the fast component is incoherent beyond one cycle,

plus i.i.d. Gaussian noise.  The label is ``slow * F + fast``.

Because every cycle sums to zero and ``T`` is a multiple of every period,
the temporal mean of a noise-free clip is exactly its slow texture: an
observer of the averaged clip cannot beat chance on the fast factor.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .fileio import atomic_write

MANIFEST = "manifest.json"
FORMAT = "mtv-synth-1"


@dataclass(frozen=True)
class SynthSpec:
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 1
    num_slow: int = 4
    num_fast: int = 4
    fast_periods: tuple[int, ...] = (2, 4)
    fast_amplitude: float = 1.0
    noise_std: float = 5.0
    phase_jitter: bool = True
    train_samples: int = 2000
    eval_samples: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fast_periods", tuple(int(p) for p in self.fast_periods))
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ConfigError("clip extents must be positive")
        if self.num_slow < 1 or self.num_fast < 1:
            raise ConfigError("num_slow and num_fast must be positive")
        if not self.fast_periods or min(self.fast_periods) < 2:
            raise ConfigError("fast periods must be at least 2 frames")
        for p in self.fast_periods:
            if self.frames % p:
                raise ConfigError(f"frames {self.frames} is not a multiple of fast period {p}")
        if self.noise_std < 0 or self.train_samples < 0 or self.eval_samples < 0:
            raise ConfigError("noise_std and sample counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.num_slow * self.num_fast

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)

    def period(self, fast: int) -> int:
        return self.fast_periods[fast % len(self.fast_periods)]

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"data: unknown key {key!r}")
        return cls(**d)


@dataclass
class Dataset:
    clips: np.ndarray  # [N, T, H, W, C] float32
    labels: np.ndarray  # [N] int64
    spec: SynthSpec = field(default_factory=SynthSpec)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


def _smooth_texture(rng: np.random.Generator, h: int, w: int, c: int) -> np.ndarray:
    """Unit-variance low-pass random texture."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    envelope = np.exp(-(fx**2 + fy**2) / (2 * 0.08**2))
    out = np.empty((h, w, c))
    for ch in range(c):
        noise = rng.standard_normal((h, w))
        tex = np.real(np.fft.ifft2(np.fft.fft2(noise) * envelope))
        out[..., ch] = (tex - tex.mean()) / tex.std()
    return out


def _grating(k: int, h: int, w: int, c: int, phase: float = 0.0) -> np.ndarray:
    """Unit-variance sinusoidal grating; ``k`` sets orientation and frequency."""
    theta = np.pi * k / 4 + (np.pi / 8) * (k // 4)
    freq = 2 * np.pi * (3 + k // 4) / max(h, w)
    y, x = np.mgrid[0:h, 0:w]
    g = np.cos(freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    g = g / np.sqrt(np.mean(g * g))
    return np.repeat(g[..., None], c, axis=-1)


def _cycle(period: int) -> np.ndarray:
    half = period // 2
    wave = np.concatenate([np.ones(half), -np.ones(half)])
    if period % 2:
        wave = np.concatenate([[1.0], -0.5 * np.ones(period - 1)])
    return wave


def slow_patterns(spec: SynthSpec) -> np.ndarray:
    """Slow textures ``[S, H, W, C]``; they depend only on ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 0])
    return np.stack([_smooth_texture(rng, spec.height, spec.width, spec.channels) for _ in range(spec.num_slow)])


def fast_component(spec: SynthSpec, fast: int, polarity: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Fast component ``[T, H, W, C]`` given per-cycle polarities and spatial phases."""
    p = spec.period(fast)
    cycle = _cycle(p)
    frames = []
    for c in range(spec.frames // p):
        g = _grating(fast, spec.height, spec.width, spec.channels, phase[c])
        frames.extend(polarity[c] * v * g for v in cycle)
    return np.stack(frames)


def _balanced_labels(rng: np.random.Generator, n: int, classes: int) -> np.ndarray:
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return labels.astype(np.int64)


def generate(spec: SynthSpec, split: str = "train") -> Dataset:
    """Generate one split; class counts differ by at most one."""
    if split not in ("train", "eval"):
        raise ContractError(f"unknown split {split!r}")
    n = spec.train_samples if split == "train" else spec.eval_samples
    rng = np.random.default_rng([spec.seed, 1 if split == "train" else 2])
    slow = slow_patterns(spec)
    labels = _balanced_labels(rng, n, spec.num_classes)
    clips = np.empty((n,) + spec.clip_shape, dtype=np.float32)
    max_cycles = spec.frames // min(spec.fast_periods)
    for i, y in enumerate(labels):
        s, f = divmod(int(y), spec.num_fast)
        polarity = rng.choice([-1.0, 1.0], size=max_cycles)
        phase = rng.uniform(0.0, 2 * np.pi, size=max_cycles)
        if not spec.phase_jitter:
            phase[:] = 0.0
        clip = slow[s][None] + spec.fast_amplitude * fast_component(spec, f, polarity, phase)
        if spec.noise_std > 0:
            clip = clip + spec.noise_std * rng.standard_normal(clip.shape)
        clips[i] = clip
    return Dataset(clips, labels, spec, split)


def oracle_accuracy_bounds(spec: SynthSpec) -> tuple[float, float]:
    """Accuracy ceilings ``(temporal_average_observer, fast_only_observer)``.

    The temporal average keeps the slow texture and nothing of the fast
    factor, so at best it resolves 1 of ``F`` fast classes.  Symmetrically an
    observer of the fast component alone resolves 1 of ``S`` slow classes.
    """
    return 1.0 / spec.num_fast, 1.0 / spec.num_slow


# ---------------------------------------------------------------------------
# on-disk format: a JSON manifest plus one raw little-endian float32 file
# per split holding the clips back to back


def save_dataset(datasets: list[Dataset], out_dir: str | os.PathLike) -> str:
    """Write splits atomically into ``out_dir``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    spec = datasets[0].spec
    manifest = {"format": FORMAT, "spec": asdict(spec), "seed": spec.seed, "splits": {}}
    for ds in datasets:
        fname = f"{ds.split}.f32"
        raw = np.ascontiguousarray(ds.clips, dtype="<f4").tobytes()
        atomic_write(os.path.join(out_dir, fname), raw)
        manifest["splits"][ds.split] = {
            "file": fname,
            "count": len(ds),
            "clip_shape": list(spec.clip_shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
            "labels": [int(y) for y in ds.labels],
        }
    path = os.path.join(out_dir, MANIFEST)
    atomic_write(path, (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode())
    return path


def load_dataset(directory: str | os.PathLike, split: str = "train") -> Dataset:
    with open(os.path.join(directory, MANIFEST)) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{directory}: unknown dataset format {manifest.get('format')!r}")
    if split not in manifest["splits"]:
        raise ContractError(f"{directory}: no split {split!r}")
    entry = manifest["splits"][split]
    spec = SynthSpec.from_dict(manifest["spec"])
    shape = (entry["count"],) + tuple(entry["clip_shape"])
    clips = np.fromfile(os.path.join(directory, entry["file"]), dtype="<f4")
    if clips.size != int(np.prod(shape)):
        raise ContractError(f"{directory}: {entry['file']} has {clips.size} values, expected {np.prod(shape)}")
    return Dataset(clips.reshape(shape).astype(np.float32), np.asarray(entry["labels"], dtype=np.int64), spec, split)
