import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fundus_vlm_cli.autodiff import Tensor
from fundus_vlm_cli.config import TrainConfig
from fundus_vlm_cli.errors import ContractError, NumericError
from fundus_vlm_cli.optim import OptimizerState, adamw_step, compute_absolute_lr, lr_at


def test_absolute_lr_scales_with_batch():
    assert compute_absolute_lr(0.001, 32) == 1.25e-4
    assert TrainConfig(base_lr=0.001, batch_size=256).absolute_lr == 0.001


def test_absolute_lr_rejects_empty_batch():
    with pytest.raises(ContractError):
        compute_absolute_lr(0.001, 0)


class TestSchedule:
    def test_warmup_is_linear(self):
        assert lr_at(0, 100, 10, 1.0) == 0.0
        assert lr_at(5, 100, 10, 1.0) == pytest.approx(0.5)
        assert lr_at(10, 100, 10, 1.0) == pytest.approx(1.0)

    def test_cosine_decays_to_zero(self):
        assert lr_at(55, 100, 10, 2.0) == pytest.approx(1.0)
        assert lr_at(100, 100, 10, 2.0) == 0.0

    def test_monotone_after_warmup(self):
        values = [lr_at(s, 50, 5, 1.0) for s in range(5, 51)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_no_warmup_starts_at_peak(self):
        assert lr_at(0, 10, 0, 0.3) == 0.3

    @pytest.mark.parametrize("step,total,warmup", [(-1, 10, 2), (11, 10, 2), (0, 10, 10)])
    def test_rejects_bad_arguments(self, step, total, warmup):
        with pytest.raises(ContractError):
            lr_at(step, total, warmup, 1.0)


class TestAdamW:
    def test_first_step_moves_by_lr_times_sign(self):
        theta = Tensor(np.zeros(3))
        params = {"w": theta}
        state = OptimizerState.zeros_like(params)
        adamw_step(params, {"w": np.array([0.5, -2.0, 1e-3])}, state, lr=1e-3, weight_decay=0.0)
        assert_allclose(theta.data, [-1e-3, 1e-3, -1e-3], rtol=1e-4)
        assert state.step == 1

    def test_zero_gradient_only_decays(self):
        theta = Tensor(np.array([1.0, -2.0, 4.0]))
        params = {"w": theta}
        state = OptimizerState.zeros_like(params)
        adamw_step(params, {"w": np.zeros(3)}, state, lr=0.1, weight_decay=0.02)
        assert_allclose(theta.data, np.array([1.0, -2.0, 4.0]) * 0.998)

    def test_missing_gradient_counts_as_zero(self):
        theta = Tensor(np.ones(2))
        params = {"w": theta}
        adamw_step(params, {}, OptimizerState.zeros_like(params), lr=0.1, weight_decay=0.02)
        assert_allclose(theta.data, np.full(2, 0.998))

    def test_non_finite_gradient_leaves_every_parameter_untouched(self):
        a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
        params = {"a": a, "b": b}
        state = OptimizerState.zeros_like(params)
        with pytest.raises(NumericError):
            adamw_step(params, {"a": np.ones(2), "b": np.array([1.0, math.inf])}, state, lr=0.1)
        assert_allclose(a.data, 1.0)
        assert_allclose(b.data, 1.0)
        assert state.step == 0

    def test_state_copy_is_independent(self):
        params = {"w": Tensor(np.zeros(2))}
        state = OptimizerState.zeros_like(params)
        snapshot = state.copy()
        adamw_step(params, {"w": np.ones(2)}, state, lr=0.1)
        assert snapshot.step == 0
        assert_allclose(snapshot.m["w"], 0.0)
