import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtv.config import toy_variant
from mtv.data import Dataset, SynthSpec, generate
from mtv.errors import ConfigError, ContractError, NonFiniteError
from mtv.model import build_model, named_parameters
from mtv.tensor import Tensor
from mtv.training import (
    METRIC_COLUMNS,
    CSVMetricsSink,
    Hyperparams,
    OptimizerState,
    Schedule,
    evaluate,
    lr_at,
    metrics_csv,
    predict,
    sgd_momentum_step,
    train,
)

MICRO_SPEC = SynthSpec(num_slow=3, num_fast=1, train_samples=100, eval_samples=30, noise_std=0.5)


def micro_config(**kw):
    return toy_variant((8,), (16,), num_layers=1, num_classes=3, global_width=16, **kw)


@pytest.fixture(scope="module")
def micro_data():
    return generate(MICRO_SPEC, "train"), generate(MICRO_SPEC, "eval")


class TestSchedule:
    def test_endpoints(self):
        s = Schedule(0.1, total_epochs=10, steps_per_epoch=4, warmup_epochs=2.5)
        assert s.total_steps == 40 and s.warmup_steps == 10
        assert lr_at(s, 0) == 0.0
        assert lr_at(s, 10) == 0.1
        assert lr_at(s, 40) == pytest.approx(0.0, abs=1e-15)
        assert lr_at(s, 5) == pytest.approx(0.05)
        assert lr_at(s, 25) == pytest.approx(0.05)

    def test_out_of_range(self):
        s = Schedule(0.1, 1, 4)
        with pytest.raises(ContractError):
            lr_at(s, 5)
        with pytest.raises(ContractError):
            lr_at(s, -1)

    @given(st.floats(0, 1), st.integers(1, 50), st.integers(1, 20), st.floats(0, 5))
    def test_non_negative_and_bounded(self, base, epochs, spe, warm):
        s = Schedule(base, epochs, spe, warm)
        lrs = [lr_at(s, k) for k in range(s.total_steps + 1)]
        assert min(lrs) >= 0 and max(lrs) <= base + 1e-15


class TestSGD:
    def test_two_steps_by_hand(self):
        p = Tensor(np.array([1.0]))
        state = OptimizerState.zeros_like([p])
        sgd_momentum_step([p], [np.array([2.0])], state, lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p.data, [0.8])
        sgd_momentum_step([p], [np.array([3.0])], state, lr=0.1, momentum=0.9)
        # v = 0.9 * 2 + 3 = 4.8, p = 0.8 - 0.48
        np.testing.assert_allclose(state.momentum[0], [4.8])
        np.testing.assert_allclose(p.data, [0.32])
        assert state.step == 2

    def test_zero_lr_updates_momentum_only(self):
        p = Tensor(np.array([1.0, 2.0]))
        state = OptimizerState.zeros_like([p])
        sgd_momentum_step([p], [np.array([1.0, 1.0])], state, lr=0.0)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        np.testing.assert_array_equal(state.momentum[0], [1.0, 1.0])

    def test_zero_momentum_is_gradient_descent(self):
        p = Tensor(np.array([1.0]))
        state = OptimizerState.zeros_like([p])
        for g in (2.0, 4.0):
            sgd_momentum_step([p], [np.array([g])], state, lr=0.5, momentum=0.0)
        np.testing.assert_allclose(p.data, [1.0 - 1.0 - 2.0])

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(2))
        with pytest.raises(ContractError):
            sgd_momentum_step([p], [np.zeros(2)], OptimizerState([np.zeros(3)]), 0.1)


class TestTrain:
    def test_zero_epochs_returns_initial_params(self, micro_data):
        cfg = micro_config()
        res = train(cfg, micro_data[0], Hyperparams(epochs=0))
        for (_, a), (_, b) in zip(named_parameters(res.params), named_parameters(build_model(cfg))):
            np.testing.assert_array_equal(a.data, b.data)
        assert res.history == []

    def test_zero_lr_keeps_params_and_metrics(self, micro_data):
        cfg = micro_config()
        res = train(cfg, micro_data[0], Hyperparams(epochs=3, base_lr=0.0), eval_set=micro_data[1])
        for (_, a), (_, b) in zip(named_parameters(res.params), named_parameters(build_model(cfg))):
            np.testing.assert_array_equal(a.data, b.data)
        for key in ("train_loss", "train_acc", "eval_acc"):
            vals = [row[key] for row in res.history]
            np.testing.assert_allclose(vals, vals[0], rtol=1e-12)

    def test_micro_run_loss_decreases(self, micro_data):
        res = train(micro_config(), micro_data[0], Hyperparams(epochs=5, base_lr=0.01, warmup_epochs=1))
        losses = [row["train_loss"] for row in res.history]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_deterministic(self, micro_data):
        hp = Hyperparams(epochs=2, base_lr=0.05, droplayer_rate=0.3, seed=4)
        a = train(micro_config(), micro_data[0], hp, eval_set=micro_data[1])
        b = train(micro_config(), micro_data[0], hp, eval_set=micro_data[1])
        assert metrics_csv(a.history) == metrics_csv(b.history)
        for (_, x), (_, y) in zip(named_parameters(a.params), named_parameters(b.params)):
            assert x.data.tobytes() == y.data.tobytes()

    def test_float32_training(self, micro_data):
        res = train(micro_config(), micro_data[0], Hyperparams(epochs=1, dtype="float32"))
        assert all(t.data.dtype == np.float32 for _, t in named_parameters(res.params))

    def test_initial_loss_near_log_classes(self, micro_data):
        res = train(micro_config(), micro_data[0], Hyperparams(epochs=1, base_lr=0.0))
        assert abs(res.history[0]["train_loss"] - math.log(3)) < 0.1 * math.log(3)

    def test_nan_aborts(self, micro_data):
        ds = micro_data[0]
        bad = Dataset(ds.clips.copy(), ds.labels, ds.spec)
        bad.clips[3, 0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError, match="non-finite loss"):
            train(micro_config(), bad, Hyperparams(epochs=1, batch_size=100))

    def test_shape_contract(self, micro_data):
        with pytest.raises(ContractError):
            train(toy_variant((8,), (16,), clip_shape=(16, 16, 16, 1), num_classes=3), micro_data[0], Hyperparams(epochs=1))
        with pytest.raises(ContractError):
            train(toy_variant((8,), (16,), num_classes=2), micro_data[0], Hyperparams(epochs=1))

    def test_strict_hyperparams(self):
        with pytest.raises(ConfigError, match="lr"):
            Hyperparams.from_dict({"lr": 0.1})
        with pytest.raises(ConfigError):
            Hyperparams(dtype="float16")


class TestMetrics:
    def test_csv_columns_and_repr_floats(self, tmp_path):
        row = {"epoch": 1, "step": 4, "lr": 0.1, "train_loss": 1 / 3, "train_acc": 0.5, "eval_acc": float("nan")}
        sink = CSVMetricsSink(tmp_path / "m.csv")
        sink(row)
        text = (tmp_path / "m.csv").read_text()
        assert text == metrics_csv([row])
        rows = list(csv.reader(io.StringIO(text)))
        assert tuple(rows[0]) == METRIC_COLUMNS
        assert rows[1] == ["1", "4", "0.1", repr(1 / 3), "0.5", ""]

    def test_evaluate_matches_predict(self, micro_data):
        params = build_model(micro_config())
        probs = predict(params, micro_data[1].clips, batch_size=7)
        np.testing.assert_allclose(probs.sum(1), 1.0, rtol=1e-12)
        assert evaluate(params, micro_data[1]) == np.mean(probs.argmax(1) == micro_data[1].labels)
        assert evaluate(params, micro_data[1], crops=(2, 1)) == evaluate(params, micro_data[1])
