import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulsetrace.loss import (
    DEFAULT_LAMBDA,
    CycleInfo,
    DiameterTrace,
    LossConfig,
    NoPeaksError,
    SequenceTooShortError,
    cyclic_loss,
    cyclic_loss_grad,
    detect_period,
    mse,
    mse_grad,
    total_loss,
    training_cycle,
)
from pulsetrace.synthdata import PhantomSpec, diameter_trace

from gradcheck import max_rel_error, numerical_grad

RAMP = np.arange(6.0)
RAMP_CYCLE = CycleInfo(period=2, n_cycles=3)


def test_mse_examples():
    assert mse(DiameterTrace([1.0, 2.0], [1.0, 2.0])) == 0.0
    assert mse(DiameterTrace([1.0, 1.0], [0.0, 0.0])) == 1.0
    assert mse(DiameterTrace([3.0, 3.0, 7.0], [2.0, 4.0, 6.0])) == 1.0


def test_mse_errors():
    with pytest.raises(ValueError):
        mse(DiameterTrace([1.0, 2.0]))
    with pytest.raises(ValueError):
        DiameterTrace([1.0, 2.0], [1.0])


def test_mse_grad_formula():
    g = mse_grad(DiameterTrace([3.0, 3.0, 7.0], [2.0, 4.0, 6.0]))
    np.testing.assert_array_equal(g, np.array([2.0, -2.0, 2.0]) / 3)


def test_detect_period_sine():
    y = 5 + np.sin(2 * np.pi * np.arange(100) / 20)
    assert detect_period(y, 47.0) == CycleInfo(period=20, n_cycles=5)


def test_detect_period_constant():
    with pytest.raises(NoPeaksError):
        detect_period(np.full(100, 4.2))


def test_detect_period_alternating_spacing():
    t = np.arange(110.0)
    peaks = [10, 30, 52, 72, 94]  # spacings 20, 22, 20, 22
    y = np.max([np.exp(-(((t - p) / 3.0) ** 2)) for p in peaks], axis=0)
    assert detect_period(y).period == 21


def test_detect_period_too_short():
    with pytest.raises(NoPeaksError):
        detect_period(np.sin(np.arange(10.0)))


@pytest.mark.parametrize("period", range(15, 31))
def test_detect_period_generator_exact(period):
    spec = PhantomSpec(d0=4.0, amplitude=0.4, period=period, phase=1.3)
    y = diameter_trace(spec, 125)
    assert detect_period(y).period == period


def test_cl_ramp_example():
    assert cyclic_loss(RAMP, RAMP_CYCLE) == 4.0


def test_cl_periodic_is_zero():
    y = np.tile([4.0, 4.5, 4.2, 3.9, 4.1], 6)
    assert cyclic_loss(y, CycleInfo(5, 6)) == 0.0
    assert not cyclic_loss_grad(y, CycleInfo(5, 6)).any()


def test_cl_pairs_stay_in_range():
    # K=7, T=2: three whole cycles, two adjacent pairs; the trailing sample is unused
    y = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 100.0])
    assert cyclic_loss(y, CycleInfo(2, 3)) == 4.0


def test_cl_too_short():
    with pytest.raises(SequenceTooShortError):
        cyclic_loss(np.arange(5.0), CycleInfo(3, 1))


dyadic = st.integers(-4096, 4096).map(lambda v: v / 64.0)


@settings(max_examples=100)
@given(values=st.lists(dyadic, min_size=12, max_size=40), period=st.integers(2, 6), offset=dyadic)
def test_cl_offset_invariance(values, period, offset):
    y = np.array(values)
    cycle = CycleInfo(period, len(y) // period)
    assert cyclic_loss(y + offset, cycle) == cyclic_loss(y, cycle)


@settings(max_examples=100)
@given(values=st.lists(st.floats(-50, 50), min_size=12, max_size=40), period=st.integers(2, 6))
def test_cl_homogeneity(values, period):
    y = np.array(values)
    cycle = CycleInfo(period, len(y) // period)
    assert cyclic_loss(2 * y, cycle) == 2 * cyclic_loss(y, cycle)


@settings(max_examples=100)
@given(values=st.lists(st.floats(0.5, 10), min_size=12, max_size=40),
       truth=st.lists(st.floats(0.5, 10), min_size=12, max_size=40), lam=st.floats(0, 10))
def test_total_loss_nonnegative(values, truth, lam):
    n = min(len(values), len(truth))
    loss, _ = total_loss(DiameterTrace(values[:n], truth[:n]), CycleInfo(3, n // 3), LossConfig(lam))
    assert loss >= 0


def test_total_loss_lambda_zero_is_mse():
    trace = DiameterTrace(np.random.default_rng(0).random(20) + 3, np.full(20, 3.5))
    loss, grad = total_loss(trace, CycleInfo(4, 5), LossConfig(0.0))
    assert loss == mse(trace)
    np.testing.assert_array_equal(grad, mse_grad(trace))


def test_total_loss_without_cycle_is_mse():
    trace = DiameterTrace(np.random.default_rng(1).random(20) + 3, np.full(20, 3.5))
    assert total_loss(trace, None, LossConfig(1.0))[0] == mse(trace)


def test_total_loss_composition():
    assert DEFAULT_LAMBDA == 1e-6
    cfg = LossConfig(DEFAULT_LAMBDA)
    loss, _ = total_loss(DiameterTrace(RAMP, RAMP), RAMP_CYCLE, cfg)
    assert loss == pytest.approx(cfg.lam * 4.0, rel=1e-15)


def test_total_loss_zero_iff_fit_and_periodic():
    y = np.tile([4.0, 4.5, 3.8], 5)
    assert total_loss(DiameterTrace(y, y), CycleInfo(3, 5), LossConfig(1.0))[0] == 0.0


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        LossConfig(-1e-3)


@pytest.mark.parametrize("lam", [0.0, 1e-6, 0.5])
def test_total_loss_gradient(lam):
    rng = np.random.default_rng(2)
    y = 4 + 0.3 * np.sin(2 * np.pi * np.arange(50) / 12)
    y_hat = y + 0.2 * rng.standard_normal(50)
    cycle = CycleInfo(12, 4)
    cfg = LossConfig(lam)
    _, grad = total_loss(DiameterTrace(y_hat, y), cycle, cfg)
    num = numerical_grad(lambda: total_loss(DiameterTrace(y_hat, y), cycle, cfg)[0], y_hat)
    assert max_rel_error(grad, num, floor=1e-12) <= 1e-6


def test_cl_gradient_closed_form():
    # dCL/dy for the ramp: each difference is -2 and CL = 4
    g = cyclic_loss_grad(RAMP, RAMP_CYCLE, LossConfig(sqrt_epsilon=0.0))
    np.testing.assert_array_equal(g, [-0.5, -0.5, 0.0, 0.0, 0.5, 0.5])


def test_training_cycle():
    y = 5 + np.sin(2 * np.pi * np.arange(100) / 20)
    assert training_cycle(y) == CycleInfo(20, 5)
    assert training_cycle(np.full(50, 3.0)) is None


def test_noisy_detection_single_case():
    rng = np.random.default_rng(3)
    spec = PhantomSpec(d0=4.0, amplitude=0.5, period=23)
    y = diameter_trace(spec, 125) + 0.02 * 0.5 * rng.standard_normal(125)
    assert abs(detect_period(y).period - 23) <= 1
    assert math.isfinite(cyclic_loss(y, detect_period(y)))
