import math

import numpy as np
import pytest

from nn_layers import Param
from optimizer import Adam, adam_step, plateau_schedule


def test_zero_gradient_leaves_params_unchanged():
    p = Param('w', np.array([1.0, -2.0, 3.0]))
    adam_step([p], 1e-2, weight_decay=0.0)
    np.testing.assert_array_equal(p.value, [1.0, -2.0, 3.0])


def test_first_step_moves_by_rate():
    p = Param('w', np.array([0.5]))
    p.grad[...] = 3.7
    adam_step([p], 1e-3, weight_decay=0.0)
    assert p.value[0] == pytest.approx(0.5 - 1e-3, rel=1e-6)


def _textbook_adam(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_quadratic_bowl_follows_reference_trajectory():
    p = Param('w', np.array([1.0]))
    opt = Adam([p], lr=1e-2, weight_decay=0.0)
    for _ in range(200):
        p.grad[...] = 2.0 * p.value
        opt.step()
    # Adam com passo fixo 1e-2 ainda oscila perto do mínimo após 200 passos.
    assert p.value[0] == pytest.approx(_textbook_adam(1.0, 1e-2, 200), abs=1e-12)
    assert abs(p.value[0]) == pytest.approx(0.01557248531724666, abs=1e-9)


def test_quadratic_bowl_reaches_tolerance_with_smaller_rate():
    p = Param('w', np.array([1.0]))
    opt = Adam([p], lr=1e-2, weight_decay=0.0)
    for step in range(2000):
        if step == 200:
            opt.set_lr(1e-3)
        p.grad[...] = 2.0 * p.value
        opt.step()
    assert abs(p.value[0]) < 1e-3


def test_frozen_parameter_is_bit_identical():
    frozen = Param('frozen', np.array([0.123456789]), lr_scale=0.0)
    live = Param('live', np.array([1.0]))
    opt = Adam([frozen, live], lr=1e-2, weight_decay=1e-3)
    for _ in range(10):
        frozen.grad[...] = 5.0
        live.grad[...] = 5.0
        opt.step()
    assert frozen.value[0] == 0.123456789
    assert live.value[0] < 1.0


def test_lr_scale_halves_first_step():
    a = Param('a', np.array([0.0]))
    b = Param('b', np.array([0.0]), lr_scale=0.5)
    a.grad[...] = b.grad[...] = 1.0
    Adam([a, b], lr=1e-2, weight_decay=0.0).step()
    assert b.value[0] == pytest.approx(a.value[0] / 2)


def test_rejects_non_positive_rate():
    with pytest.raises(ValueError):
        Adam([Param('w', np.zeros(1))], lr=0.0)


def test_state_tensors_restore():
    p = Param('w', np.array([1.0, 2.0]))
    opt = Adam([p], lr=1e-2)
    p.grad[...] = [0.5, -0.5]
    opt.step()
    state = {k: v.copy() for k, v in opt.state_tensors().items()}
    q = Param('w', p.value.copy())
    other = Adam([q], lr=1e-2)
    other.load_state_tensors(state, opt.t)
    p.grad[...] = q.grad[...] = [0.1, 0.2]
    opt.step()
    other.step()
    np.testing.assert_array_equal(p.value, q.value)


def test_plateau_decreasing_history_never_drops():
    assert plateau_schedule(list(np.linspace(1, 0, 200)), 1e-3, patience=50) == (1e-3, 0)


def test_plateau_flat_history_drops_once():
    lr, drops = plateau_schedule([1.0] * 51, 1e-3, patience=50)
    assert drops == 1
    assert lr == pytest.approx(1e-4)


def test_plateau_two_plateaus():
    history = [1.0] * 6 + [0.5] * 6
    lr, drops = plateau_schedule(history, 1.0, patience=5, factor=10, max_drops=3)
    assert drops == 2
    assert lr == pytest.approx(0.01)


def test_plateau_respects_max_drops():
    _, drops = plateau_schedule([1.0] * 1000, 1e-3, patience=10, max_drops=3)
    assert drops == 3
