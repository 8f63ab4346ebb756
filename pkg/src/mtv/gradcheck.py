"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_input: int
    worst_index: tuple[int, ...]
    autodiff: float
    numeric: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare autodiff gradients of scalar ``f(*inputs)`` to central differences.

    The error per coordinate is ``|autodiff - numeric| / (|numeric| + step)``.
    ``max_coords`` limits the number of probed coordinates per input (chosen
    at random) for large parameter sets.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in xs:
        x.requires_grad = True
        x.grad = None
        if not (x.data.flags.c_contiguous and x.data.flags.writeable):
            x.data = np.array(x.data, order="C")
    out = f(*xs)
    backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    worst = GradCheckResult(0.0, -1, (), 0.0, 0.0)
    rng = rng or np.random.default_rng(0)
    for k, x in enumerate(xs):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + step
                fp = float(f(*xs).data)
                flat[c] = orig - step
                fm = float(f(*xs).data)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * step)
            auto = float(analytic[k].reshape(-1)[c])
            err = abs(auto - numeric) / (abs(numeric) + step)
            if err > worst.max_rel_error or worst.worst_input < 0:
                worst = GradCheckResult(err, k, np.unravel_index(c, x.shape), auto, numeric)
    return worst


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tol: float | None = None,
    max_coords: int | None = None,
) -> float:
    """Return the maximum relative gradient error; raise if it exceeds ``tol``."""
    result = gradcheck(f, x, step=step, max_coords=max_coords)
    if tol is not None and not result.passed(tol):
        raise AssertionError(
            f"gradient mismatch {result.max_rel_error:.3e} at input {result.worst_input} "
            f"index {result.worst_index}: autodiff={result.autodiff:.6e} numeric={result.numeric:.6e}"
        )
    return result.max_rel_error


# ---------------------------------------------------------------------------
# the standard suite: every differentiable op plus a micro end-to-end model

SUITE_TOL = 1e-4


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    from . import tensor as tn

    # a fixed random projection keeps sums of invariant outputs (softmax) informative
    return tn.sum_(tn.mul(out, Tensor(w)))


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    from . import tensor as tn

    def r(*shape, positive=False):
        x = rng.standard_normal(shape)
        return Tensor(np.abs(x) + 0.5 if positive else x)

    def proj(shape):
        return rng.standard_normal(shape)

    w23, w34, w4 = proj((2, 3)), proj((2, 4)), proj((3, 2, 4))
    w21, w3, w32, w423, w22, w25 = proj((2, 1)), proj((3,)), proj((3, 2)), proj((4, 2, 3)), proj((2, 2)), proj((2, 5))
    labels = np.array([0, 2, 1])
    cases = [
        ("add", lambda a, b: _weighted(tn.add(a, b), w23), [r(2, 3), r(3)]),
        ("sub", lambda a, b: _weighted(tn.sub(a, b), w23), [r(2, 3), r(2, 1)]),
        ("neg", lambda a: _weighted(tn.neg(a), w23), [r(2, 3)]),
        ("mul", lambda a, b: _weighted(tn.mul(a, b), w23), [r(2, 3), r(1, 3)]),
        ("div", lambda a, b: _weighted(tn.div(a, b), w23), [r(2, 3), r(2, 3, positive=True)]),
        ("exp", lambda a: _weighted(tn.exp(a), w23), [r(2, 3)]),
        ("log", lambda a: _weighted(tn.log(a), w23), [r(2, 3, positive=True)]),
        ("gelu", lambda a: _weighted(tn.gelu(a), w23), [r(2, 3)]),
        ("matmul", lambda a, b: _weighted(tn.matmul(a, b), w34), [r(2, 3), r(3, 4)]),
        ("matmul_batched", lambda a, b: _weighted(tn.matmul(a, b), w4), [r(3, 2, 5), r(5, 4)]),
        ("linear", lambda x, w, b: _weighted(tn.linear(x, w, b), w4), [r(3, 2, 5), r(5, 4), r(4)]),
        ("sum", lambda a: _weighted(tn.sum_(a, axis=1, keepdims=True), w21), [r(2, 3)]),
        ("mean", lambda a: _weighted(tn.mean(a, axis=0), w3), [r(2, 3)]),
        ("softmax", lambda a: _weighted(tn.softmax(a, axis=-1), w23), [r(2, 3)]),
        ("log_softmax", lambda a: _weighted(tn.log_softmax(a, axis=-1), w23), [r(2, 3)]),
        ("layer_norm", lambda x, g, b: _weighted(tn.layer_norm(x, g, b), w34), [r(2, 4), r(4), r(4)]),
        ("cross_entropy", lambda z: tn.cross_entropy(z, labels), [r(3, 4)]),
        ("cross_entropy_smoothed", lambda z: tn.cross_entropy(z, labels, 0.2), [r(3, 4)]),
        ("reshape", lambda a: _weighted(tn.reshape(a, (3, 2)), w32), [r(2, 3)]),
        ("transpose", lambda a: _weighted(tn.transpose(a, (1, 0)), w32), [r(2, 3)]),
        ("swapaxes", lambda a: _weighted(tn.swapaxes(a, 0, 2), w423), [r(3, 2, 4)]),
        ("broadcast_to", lambda a: _weighted(tn.broadcast_to(a, (2, 3)), w23), [r(1, 3)]),
        ("concat", lambda a, b: _weighted(tn.concat([a, b], axis=1), w25), [r(2, 3), r(2, 2)]),
        ("take", lambda a: _weighted(tn.take(a, (slice(None), [0, 2, 0])), w23), [r(2, 3)]),
        ("slice_axis", lambda a: _weighted(tn.slice_axis(a, 1, 3, axis=1), w22), [r(2, 3)]),
    ]
    return cases


def micro_config():
    """Two views, one layer each, cross-view attention, one global layer."""
    from .config import EncoderConfig, FusionSpec, GlobalConfig, MTVConfig, TubeletSpec, ViewSpec

    return MTVConfig(
        clip_shape=(4, 4, 4, 1),
        views=(
            ViewSpec(TubeletSpec(4, 2, 2), EncoderConfig(1, 8, 16, 2)),
            ViewSpec(TubeletSpec(2, 2, 2), EncoderConfig(1, 6, 12, 2)),
        ),
        fusion=FusionSpec("cva", (0,)),
        global_encoder=GlobalConfig(num_layers=1, hidden_size=8, mlp_dim=16, num_heads=2),
        num_classes=3,
        init_scheme="fan_in",
    )


def model_check(config=None, seed: int = 0, max_coords: int | None = None) -> GradCheckResult:
    """Finite-difference check of the loss w.r.t. every model parameter.

    Zero-initialised parameters are perturbed first so that every path
    carries gradient.
    """
    from . import tensor as tn
    from .model import build_model, forward, named_parameters

    config = config or micro_config()
    rng = np.random.default_rng(seed)
    params = build_model(config, dtype=np.float64)
    plist = [t for _, t in named_parameters(params)]
    for t in plist:
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    clips = Tensor(rng.standard_normal((2,) + tuple(config.clip_shape)))
    labels = rng.integers(0, config.num_classes, size=2)

    def loss(*_):
        return tn.cross_entropy(forward(params, clips), labels)

    return gradcheck(loss, plist, max_coords=max_coords, rng=rng)


def run_suite(seed: int = 0, config=None, max_coords: int | None = None) -> list[tuple[str, GradCheckResult]]:
    """Check every op and the end-to-end model in double precision."""
    from .tensor import default_dtype

    rng = np.random.default_rng(seed)
    results = []
    with default_dtype(np.float64):
        for name, f, inputs in _op_cases(rng):
            results.append((name, gradcheck(f, inputs, rng=rng)))
        results.append(("model", model_check(config, seed, max_coords)))
    return results
