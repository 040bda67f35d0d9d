"""Unit tests for the Adam optimizer and learning-rate schedule."""

import numpy as np
import pytest

from fif_flow.errors import DimensionError
from fif_flow.training.optim import (
    AdamHyper,
    OptimState,
    adam_step,
    clip_by_global_norm,
    current_lr,
    one_cycle_lr,
)


class TestAdamHyper:
    """Tests for AdamHyper validation."""

    def test_unknown_schedule(self):
        with pytest.raises(ValueError):
            AdamHyper(schedule="step")

    def test_non_positive_lr(self):
        with pytest.raises(ValueError):
            AdamHyper(lr=0.0)

    def test_pct_start_range(self):
        with pytest.raises(ValueError):
            AdamHyper(pct_start=1.0)


class TestOneCycle:
    """Tests for one_cycle_lr."""

    def test_starts_at_initial_rate(self):
        assert one_cycle_lr(0, 100, 1e-3) == pytest.approx(1e-3 / 25.0)

    def test_peaks_at_end_of_warmup(self):
        assert one_cycle_lr(29, 100, 1e-3) == pytest.approx(1e-3)

    def test_ends_at_minimum(self):
        assert one_cycle_lr(99, 100, 1e-3) == pytest.approx(1e-3 / 25.0 / 1e4)

    def test_warmup_increases_then_anneals(self):
        rates = [one_cycle_lr(s, 100, 1e-3) for s in range(100)]
        peak = int(np.argmax(rates))
        assert np.all(np.diff(rates[:peak + 1]) > 0)
        assert np.all(np.diff(rates[peak:]) < 0)

    def test_steps_past_end_are_clamped(self):
        assert one_cycle_lr(150, 100, 1e-3) == pytest.approx(one_cycle_lr(99, 100, 1e-3))

    def test_single_step_run(self):
        assert one_cycle_lr(0, 1, 2e-3) == 2e-3

    def test_constant_schedule(self):
        state = OptimState(step=40, total_steps=50)
        assert current_lr(state, AdamHyper(lr=0.01, schedule="constant")) == 0.01


class TestClip:
    """Tests for clip_by_global_norm."""

    def test_joint_norm(self):
        grads = {'encoder': np.array([3.0]), 'decoder': np.array([4.0])}
        clipped, norm = clip_by_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(clipped['encoder'], [0.6])
        np.testing.assert_allclose(clipped['decoder'], [0.8])

    def test_below_threshold_untouched(self):
        grads = {'encoder': np.array([0.1, 0.2])}
        clipped, _ = clip_by_global_norm(grads, 10.0)
        assert clipped is grads

    def test_disabled(self):
        grads = {'encoder': np.array([100.0])}
        clipped, norm = clip_by_global_norm(grads, None)
        assert norm == 100.0 and clipped is grads


class TestAdamStep:
    """Tests for adam_step."""

    def test_first_step_moves_by_lr_against_gradient_sign(self):
        """With bias correction the first update is lr·g/|g| per coordinate."""
        # Setup
        params = {'encoder': np.array([1.0, -2.0, 0.5])}
        grads = {'encoder': np.array([0.3, -7.0, 2.0])}
        hyper = AdamHyper(lr=0.1, schedule="constant", eps=0.0)

        # Execute
        new_params, state = adam_step(params, grads, OptimState(), hyper)

        # Assert
        np.testing.assert_allclose(new_params['encoder'], [0.9, -1.9, 0.4])
        assert state.step == 1

    def test_does_not_mutate_inputs(self):
        params = {'encoder': np.ones(2)}
        state = OptimState.zeros_like(params, total_steps=10)
        adam_step(params, {'encoder': np.ones(2)}, state, AdamHyper())
        np.testing.assert_array_equal(params['encoder'], 1.0)
        assert state.step == 0
        np.testing.assert_array_equal(state.m['encoder'], 0.0)

    def test_decoupled_weight_decay(self):
        """Zero gradient leaves only the multiplicative decay p·(1 − lr·wd)."""
        params = {'decoder': np.array([2.0])}
        hyper = AdamHyper(lr=0.1, weight_decay=0.5, schedule="constant")
        new_params, _ = adam_step(params, {'decoder': np.array([0.0])}, OptimState(), hyper)
        np.testing.assert_allclose(new_params['decoder'], [2.0 * (1 - 0.05)])

    def test_minimizes_quadratic(self):
        params = {'encoder': np.array([3.0, -4.0])}
        state = OptimState.zeros_like(params, total_steps=500)
        hyper = AdamHyper(lr=0.05, schedule="constant")
        for _ in range(500):
            params, state = adam_step(params, {'encoder': 2.0 * params['encoder']}, state, hyper)
        np.testing.assert_allclose(params['encoder'], 0.0, atol=0.1)

    def test_group_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step({'encoder': np.ones(2)}, {'decoder': np.ones(2)}, OptimState(), AdamHyper())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step({'encoder': np.ones(2)}, {'encoder': np.ones(3)}, OptimState(), AdamHyper())
