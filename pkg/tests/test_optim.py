import math

import numpy as np

from prelab.autodiff import Parameter
from prelab.optim import AdamW, WarmupCosine, grad_norm


def test_zero_grad_no_decay_is_fixed_point():
    p = Parameter("w", np.array([1.0, -2.0]))
    opt = AdamW([p], lr=0.1)
    before = p.value.copy()
    opt.step()
    assert np.array_equal(p.value, before)


def test_zero_grad_decoupled_decay():
    p = Parameter("w", np.array([1.0, -2.0, 0.5]))
    before = p.value.copy()
    opt = AdamW([p], lr=0.1, weight_decay=0.3)
    opt.step()
    assert np.max(np.abs(p.value - before * (1 - 0.1 * 0.3))) < 1e-15


def test_lr_zero_leaves_parameters_bitwise():
    p = Parameter("w", np.array([0.123456789, -9.87654321]))
    p.grad[...] = [1.0, -2.0]
    before = p.value.copy()
    AdamW([p], lr=0.0).step()
    assert np.array_equal(p.value, before)


def test_five_steps_match_hand_stepped_reference():
    lr, b1, b2, eps, wd = 0.05, 0.9, 0.999, 1e-8, 0.01
    p = Parameter("w", np.array([1.5]))
    opt = AdamW([p], lr=lr, weight_decay=wd)

    w_ref = 1.5
    m = v = 0.0
    for t in range(1, 6):
        g = 2.0 * p.value[0]  # loss w^2, evaluated at the engine's state
        p.grad[...] = g
        opt.step()
        g_ref = 2.0 * w_ref
        m = b1 * m + (1 - b1) * g_ref
        v = b2 * v + (1 - b2) * g_ref * g_ref
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w_ref = w_ref - lr * (mhat / (math.sqrt(vhat) + eps))
        w_ref = w_ref * (1 - lr * wd)
        assert abs(p.value[0] - w_ref) < 1e-12, t


def test_bias_correction_first_step_size():
    # with constant gradient g, the first bias-corrected step is lr * g/(|g|+eps)
    p = Parameter("w", np.array([0.0]))
    p.grad[...] = [3.0]
    AdamW([p], lr=0.1).step()
    assert abs(p.value[0] + 0.1 * (3.0 / (3.0 + 1e-8))) < 1e-12


def test_warmup_then_cosine_to_zero():
    sched = WarmupCosine(base_lr=1.0, total_steps=100, warmup_frac=0.03)
    assert sched.warmup_steps == 3
    assert sched.lr(1) == 1.0 / 3
    assert sched.lr(3) == 1.0
    assert sched.lr(100) < 1e-15
    mid = sched.lr(51)
    assert 0.4 < mid < 0.6
    lrs = [sched.lr(t) for t in range(3, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))  # monotone decay


def test_schedule_is_used_by_optimizer():
    p = Parameter("w", np.array([1.0]))
    opt = AdamW([p], lr=1.0, schedule=WarmupCosine(1.0, 10, 0.3))
    p.grad[...] = [1.0]
    opt.step()
    assert opt.current_lr() == 1.0 / 3


def test_grad_norm():
    a = Parameter("a", np.zeros(2))
    b = Parameter("b", np.zeros(2))
    a.grad[...] = [3.0, 0.0]
    b.grad[...] = [0.0, 4.0]
    assert abs(grad_norm([a, b]) - 5.0) < 1e-12
