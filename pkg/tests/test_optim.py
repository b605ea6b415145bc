import numpy as np
import pytest

from core.errors import InvalidArgumentError, NonFiniteGradientError, OptimizationAbortError, ShapeMismatchError
from core.optim import AdamState, TrainSpec, adam_step
from core.regnet import NetConfig, init_params


@pytest.fixture
def tiny_params():
    config = NetConfig(ndim=2, encoder_channels=(), decoder_channels=(), kernel_size=1)
    return init_params(config, seed=0)


def constant_grads(params, value):
    return {name: np.full_like(t, value) for name, t in params.tensors.items()}


def test_zero_gradient_is_a_no_op(tiny_params):
    state = AdamState.for_params(tiny_params, lr=0.1)
    params, new_state = adam_step(tiny_params, constant_grads(tiny_params, 0.0), state)
    for name in tiny_params.tensors:
        assert np.array_equal(params.tensors[name], tiny_params.tensors[name])
        assert not np.any(new_state.m[name])
        assert not np.any(new_state.v[name])
    assert new_state.t == 1


def test_first_step_moves_by_learning_rate(tiny_params):
    state = AdamState.for_params(tiny_params, lr=0.01)
    grads = {name: np.where(np.arange(t.size).reshape(t.shape) % 2 == 0, 3.0, -0.5)
             for name, t in tiny_params.tensors.items()}
    params, _ = adam_step(tiny_params, grads, state)
    for name, before in tiny_params.tensors.items():
        np.testing.assert_allclose(params.tensors[name] - before, -0.01 * np.sign(grads[name]), rtol=1e-5)


def test_ten_steps_follow_the_recurrence(tiny_params):
    lr, beta1, beta2, eps = 0.05, 0.9, 0.999, 1e-8
    state = AdamState.for_params(tiny_params, lr=lr)
    params = tiny_params
    sequence = [0.3, -1.2, 0.7, 2.0, -0.1, 0.4, 0.4, -3.0, 1.1, 0.05]
    expected = tiny_params.tensors["flow.bias"].copy()
    m = v = 0.0
    for t, g in enumerate(sequence, start=1):
        params, state = adam_step(params, constant_grads(params, g), state)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        expected = expected - lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
    np.testing.assert_allclose(params.tensors["flow.bias"], expected, rtol=1e-12)
    assert state.t == len(sequence)


def test_step_does_not_mutate_inputs(tiny_params):
    state = AdamState.for_params(tiny_params)
    snapshot = {k: v.copy() for k, v in tiny_params.tensors.items()}
    adam_step(tiny_params, constant_grads(tiny_params, 1.0), state)
    assert state.t == 0
    for name in snapshot:
        assert np.array_equal(tiny_params.tensors[name], snapshot[name])
        assert not np.any(state.m[name])


def test_non_finite_gradient_aborts(tiny_params):
    state = AdamState.for_params(tiny_params)
    grads = constant_grads(tiny_params, 1.0)
    grads["flow.bias"] = np.array([np.nan, 1.0])
    with pytest.raises(NonFiniteGradientError) as info:
        adam_step(tiny_params, grads, state)
    assert isinstance(info.value, OptimizationAbortError)
    assert info.value.step == 1
    assert info.value.diagnostics['parameter'] == "flow.bias"


def test_gradient_shape_checked(tiny_params):
    grads = constant_grads(tiny_params, 1.0)
    grads["flow.bias"] = np.ones(3)
    with pytest.raises(ShapeMismatchError):
        adam_step(tiny_params, grads, AdamState.for_params(tiny_params))


@pytest.mark.parametrize("kwargs", [
    {'steps': 0},
    {'lam': -1.0},
    {'lam': float('nan')},
    {'lr': 0.0},
    {'smoothness_reduction': 'max'},
    {'sampling': 'shuffle'},
])
def test_train_spec_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        TrainSpec(**kwargs)


def test_objective_defaults_sum_smoothness():
    spec = TrainSpec()
    assert spec.smoothness_reduction == 'sum'
    assert spec.lam == 10.0
    assert TrainSpec(smoothness_reduction='mean').to_dict()['smoothness_reduction'] == 'mean'


def test_window_defaults_and_scaling():
    spec = TrainSpec()
    assert spec.window_for((64, 64)) == (6, 6)
    assert spec.window_for((16, 16, 16)) == (5, 5, 5)
    assert spec.window_for((64, 64), scale=0.5) == (3, 3)
    assert spec.window_for((64, 64), scale=0.125) == (3, 3)
    assert spec.window_for((2, 64)) == (2, 6)


def test_window_from_list_and_with_steps():
    spec = TrainSpec(window=[9, 7], steps=5)
    assert spec.window == (9, 7)
    assert spec.window_for((32, 32), scale=0.5) == (4, 4)
    assert spec.with_steps(2).steps == 2
    assert spec.to_dict()['window'] == [9, 7]


def test_zero_gradient_keeps_warm_state(tiny_params):
    params, state = adam_step(tiny_params, constant_grads(tiny_params, 1.0), AdamState.for_params(tiny_params, lr=0.1))
    after, new_state = adam_step(params, constant_grads(params, 0.0), state)
    assert new_state.t == 2
    for name in params.tensors:
        assert np.array_equal(after.tensors[name], params.tensors[name])
        assert np.array_equal(new_state.m[name], state.m[name])
        assert np.array_equal(new_state.v[name], state.v[name])


def test_zero_gradient_tensor_still_follows_momentum(tiny_params):
    lr, beta1, beta2, eps = 0.1, 0.9, 0.999, 1e-8
    params, state = adam_step(tiny_params, constant_grads(tiny_params, 1.0), AdamState.for_params(tiny_params, lr=lr))
    grads = constant_grads(params, 1.0)
    grads["flow.bias"] = np.zeros_like(grads["flow.bias"])
    after, new_state = adam_step(params, grads, state)

    m = beta1 * (1 - beta1)
    v = beta2 * (1 - beta2)
    update = lr * (m / (1 - beta1 ** 2)) / (np.sqrt(v / (1 - beta2 ** 2)) + eps)
    np.testing.assert_allclose(after.tensors["flow.bias"], params.tensors["flow.bias"] - update, rtol=1e-12)
    np.testing.assert_allclose(new_state.m["flow.bias"], m, rtol=1e-12)
