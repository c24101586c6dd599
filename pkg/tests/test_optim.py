import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sit.autograd import ContractError, Parameter
from sit.model import ModelConfig, build_model
from sit.optim import AdamState, Schedule, adam_step, lr_at


def scalar_param(value, grad, name="w.weight"):
    p = Parameter(np.array([value], dtype=np.float64), name)
    p.grad = np.array([grad], dtype=np.float64)
    return p


def const(lr):
    return Schedule(kind="constant", base_lr=lr)


def test_zero_grad_zero_wd_leaves_params():
    p = scalar_param(1.5, 0.0)
    st_ = AdamState(weight_decay=0.0, schedule=const(0.1))
    adam_step([p], st_)
    assert p.data[0] == 1.5 and st_.step == 1


def test_first_step_hand_value():
    p = scalar_param(1.0, 1.0)
    adam_step([p], AdamState(weight_decay=0.0, schedule=const(0.1)))
    # m_hat = 1, v_hat = 1 -> delta = -0.1 / (1 + 1e-8)
    m = (1 - 0.9) * 1.0 / (1 - 0.9)
    v = (1 - 0.999) * 1.0 / (1 - 0.999)
    expected = 1.0 - 0.1 * m / (math.sqrt(v) + 1e-8)
    assert abs(p.data[0] - expected) <= 1e-15
    assert abs(p.data[0] - 0.9) <= 1e-8


def test_two_step_hand_value():
    p = scalar_param(1.0, 1.0)
    st_ = AdamState(weight_decay=0.0, schedule=const(0.1))
    adam_step([p], st_)
    p.grad = np.array([-2.0])
    adam_step([p], st_)
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    mh, vh = m / (1 - 0.81), v / (1 - 0.999**2)
    expected = (1.0 - 0.1 / (1 + 1e-8)) - 0.1 * mh / (math.sqrt(vh) + 1e-8)
    assert abs(p.data[0] - expected) <= 1e-12


def test_decoupled_decay_only_on_weights():
    w = scalar_param(2.0, 0.0, "blocks.0.mlp.fc1.weight")
    b = scalar_param(2.0, 0.0, "blocks.0.mlp.fc1.bias")
    s = scalar_param(2.0, 0.0, "uncertainty.s1")
    tok = scalar_param(2.0, 0.0, "rot_token")
    adam_step([w, b, s, tok], AdamState(weight_decay=0.05, schedule=const(0.1)))
    assert abs(w.data[0] - 2.0 * (1 - 0.1 * 0.05)) <= 1e-15
    assert b.data[0] == s.data[0] == tok.data[0] == 2.0


def test_grads_zeroed_and_missing_grad_raises():
    p = scalar_param(1.0, 3.0)
    adam_step([p], AdamState(schedule=const(0.1)))
    assert np.all(p.grad == 0)
    q = Parameter(np.zeros(2), "q.weight")
    with pytest.raises(ContractError, match="q.weight"):
        adam_step([q], AdamState())


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), st.integers(1, 20))
def test_constant_gradient_moves_against_sign(g, steps):
    p = scalar_param(0.0, g, "x.bias")
    st_ = AdamState(schedule=Schedule(base_lr=0.01, warmup_steps=2, total_steps=100))
    prev = 0.0
    for i in range(steps + 2):
        p.grad = np.array([g])
        adam_step([p], st_)
        if i >= 2:
            assert np.sign(p.data[0] - prev) == -np.sign(g)
        prev = p.data[0]


def test_schedule_points():
    s = Schedule(base_lr=1e-3, warmup_steps=10, total_steps=110, floor_lr=1e-5)
    assert lr_at(0, s) == 0.0
    assert lr_at(5, s) == 5e-4
    assert lr_at(10, s) == 1e-3
    assert abs(lr_at(60, s) - (1e-3 + 1e-5) / 2) <= 1e-9
    assert abs(lr_at(110, s) - 1e-5) <= 1e-15
    assert abs(lr_at(500, s) - 1e-5) <= 1e-15
    assert lr_at(7, const(3e-4)) == 3e-4
    with pytest.raises(ValueError):
        lr_at(-1, s)


def test_schedule_monotone_after_warmup():
    s = Schedule(base_lr=1e-3, warmup_steps=5, total_steps=50)
    vals = [lr_at(i, s) for i in range(5, 60)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_bad_schedule_kind():
    with pytest.raises(ValueError):
        Schedule(kind="step")


def _run(model, state, steps, seed):
    rng = np.random.default_rng(seed)
    params = model.parameters()
    for _ in range(steps):
        for p in params:
            p.grad = rng.standard_normal(p.shape).astype(p.dtype)
        adam_step(params, state)


def test_identical_runs_bit_identical():
    cfg = ModelConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2, contrastive_dim=4)
    a, b = build_model(cfg), build_model(cfg)
    sa = AdamState(schedule=Schedule(base_lr=1e-3, warmup_steps=2, total_steps=10))
    sb = AdamState.from_hyperparams(sa.hyperparams())
    _run(a, sa, 10, 0)
    _run(b, sb, 10, 0)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)
    for k in sa.m:
        assert np.array_equal(sa.m[k], sb.m[k]) and np.array_equal(sa.v[k], sb.v[k])


def test_hyperparams_round_trip():
    s = AdamState(weight_decay=0.01, max_grad_norm=1.0, step=7, schedule=Schedule(base_lr=2e-4, warmup_steps=3, total_steps=9))
    assert AdamState.from_hyperparams(s.hyperparams()).hyperparams() == s.hyperparams()


def test_clip_grad_norm_bounds_update_input():
    p = scalar_param(0.0, 30.0, "a.bias")
    q = scalar_param(0.0, 40.0, "b.bias")
    st_ = AdamState(max_grad_norm=1.0, schedule=const(0.1))
    adam_step([p, q], st_)
    # clipping rescales g to norm ~1 but Adam's first step is scale-free
    assert abs(p.data[0] + 0.1) <= 1e-6 and abs(q.data[0] + 0.1) <= 1e-6
    assert abs(math.hypot(st_.m["a.bias"][0], st_.m["b.bias"][0]) / 0.1 - 1.0) <= 1e-5
