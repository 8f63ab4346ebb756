import numpy as np
import pytest

from mtv.config import EncoderConfig, FusionSpec, GlobalConfig, MTVConfig, TubeletSpec, ViewSpec


def small_config(method="none", layers=(0,), scope="local", num_layers=1, attention="factorized", **fusion_kw):
    """Two views on a 4x4x4 clip: coarse t=4 (width 8) and fine t=2 (width 6)."""
    fusion = FusionSpec(method, layers if method != "none" else (), cva_scope=scope, **fusion_kw)
    return MTVConfig(
        clip_shape=(4, 4, 4, 1),
        views=(
            ViewSpec(TubeletSpec(4, 2, 2), EncoderConfig(num_layers, 8, 16, 2, attention)),
            ViewSpec(TubeletSpec(2, 2, 2), EncoderConfig(num_layers, 6, 12, 2, attention)),
        ),
        fusion=fusion,
        global_encoder=GlobalConfig(num_layers=1, hidden_size=8, mlp_dim=16, num_heads=2),
        num_classes=3,
        init_scheme="fan_in",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
