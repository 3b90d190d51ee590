import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jumpland.reference import Phase
from jumpland.rewards import (
    TERM_NAMES,
    RewardConfig,
    compute_reward,
    joint_sigma,
    joint_tracking_gradient_scale,
    tracking_term,
)
from jumpland.simulator import quat_from_rotvec

IDQ = np.array([1.0, 0.0, 0.0, 0.0])
HOME = np.tile([0.0, 0.896, -1.791], 4)


def reward(phase=Phase.STANCE, q_err=None, actions=(0, 0, 0), torques=0.0, qd=0.0, collision=False, cfg=RewardConfig()):
    q = HOME if q_err is None else HOME + q_err
    a, a1, a2 = (np.full(12, float(v)) for v in actions)
    return compute_reward(
        np.array([0.1, 0.0, 0.25]), IDQ, q, np.array([0.1, 0.0, 0.25]), IDQ, HOME,
        a, a1, a2, np.full(12, float(torques)), np.full(12, float(qd)), phase, collision, cfg,
    )


def single_joint_error(e, j=4):
    err = np.zeros(12)
    err[j] = e
    return err


def test_tracking_term_examples():
    assert tracking_term([1.0, 2.0], [1.0, 2.0], 0.3) == 1.0
    assert tracking_term([0.0], [0.5], 0.5) == pytest.approx(math.exp(-1))
    assert tracking_term(IDQ, IDQ, 0.01, orientation=True) == 1.0


def test_relaxation_pair():
    e = single_joint_error(0.2)
    assert tracking_term(HOME + e, HOME, 0.2) == pytest.approx(math.exp(-1), abs=1e-9)
    assert tracking_term(HOME + e, HOME, 2.0) == pytest.approx(math.exp(-0.01), abs=1e-9)


def test_perfect_tracking_totals_nine():
    rb = reward()
    assert rb.total == pytest.approx(9.0, abs=1e-12)
    assert set(rb.terms) == set(TERM_NAMES)


def test_collision_costs_ten():
    assert reward(collision=True).total - reward().total == pytest.approx(-10.0)
    assert reward(collision=True).terms["base_collision"] == -10.0


def test_constant_actions_have_no_rate_penalties():
    rb = reward(actions=(0.7, 0.7, 0.7))
    assert rb.terms["action_rate"] == 0.0 and rb.terms["smoothness"] == 0.0


def test_penalty_terms_by_hand():
    rb = reward(actions=(1.0, 0.5, 0.5), torques=2.0, qd=3.0)
    assert rb.terms["action_rate"] == pytest.approx(-0.01 * 12 * 0.25)
    assert rb.terms["smoothness"] == pytest.approx(-0.02 * 12 * 0.25)
    assert rb.terms["power"] == pytest.approx(-2e-5 * 12 * 6.0)
    assert rb.terms["torque"] == pytest.approx(-1e-5 * 12 * 4.0)


def test_landing_uses_relaxed_sigma():
    err = single_joint_error(0.2)
    assert reward(Phase.LANDING, err).terms["joint"] == pytest.approx(2 * math.exp(-0.01))
    assert reward(Phase.FLIGHT, err).terms["joint"] == pytest.approx(2 * math.exp(-1))
    ablated = RewardConfig().without_relaxation()
    assert reward(Phase.LANDING, err, cfg=ablated).terms["joint"] == pytest.approx(2 * math.exp(-1))
    np.testing.assert_array_equal(joint_sigma([0, 1, 2, 3], RewardConfig()), [0.2, 0.2, 0.2, 2.0])


def test_gradient_scale():
    assert joint_tracking_gradient_scale(0.2, 2.0) == pytest.approx(100.0)
    assert joint_tracking_gradient_scale(0.7, 0.7) == 1.0
    with pytest.raises(ValueError):
        joint_tracking_gradient_scale(0.0, 1.0)


def fd_slope(sigma, e=0.01, h=1e-7):
    f = lambda x: tracking_term(HOME + single_joint_error(x), HOME, sigma)
    return (f(e + h) - f(e - h)) / (2 * h)


def test_small_error_gradient_ratio():
    ratio = fd_slope(0.2) / fd_slope(2.0)
    assert ratio == pytest.approx(100.0, rel=0.01)


def test_base_tracking_dominates_during_landing():
    cfg = RewardConfig()
    for e in (1e-3, 5e-3):
        h = 1e-8
        base = lambda x: cfg.w_base_pos * tracking_term([x, 0, 0], [0, 0, 0], cfg.sigma_base_pos)
        joint = lambda x: cfg.w_joint * tracking_term(HOME + single_joint_error(x), HOME, cfg.sigma_joint_landing)
        g_base = abs(base(e + h) - base(e - h)) / (2 * h)
        g_joint = abs(joint(e + h) - joint(e - h)) / (2 * h)
        assert g_base > g_joint


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1.0), st.floats(1e-3, 1.0), st.floats(0.05, 3.0))
def test_tracking_monotone_and_bounded(e1, e2, sigma):
    lo, hi = sorted((e1, e2))
    r_lo = tracking_term([lo], [0.0], sigma)
    r_hi = tracking_term([hi], [0.0], sigma)
    assert 0.0 <= r_hi <= r_lo <= 1.0
    if hi - lo > 1e-6 and r_lo > 1e-300:
        assert r_hi < r_lo


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1.5), st.integers(0, 11))
def test_relaxed_reward_exceeds_strict(e, j):
    err = single_joint_error(e, j)
    assert tracking_term(HOME + err, HOME, 2.0) > tracking_term(HOME + err, HOME, 0.2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3), st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3))
def test_orientation_double_cover(a, b):
    qa, qb = quat_from_rotvec(np.array(a)), quat_from_rotvec(np.array(b))
    r1 = tracking_term(qa, qb, 0.5, orientation=True)
    assert r1 == pytest.approx(tracking_term(-qa, qb, 0.5, orientation=True), abs=1e-12)
    assert r1 == pytest.approx(tracking_term(qa, -qb, 0.5, orientation=True), abs=1e-12)


def test_orientation_uses_rotation_angle():
    q = quat_from_rotvec(np.array([0.0, 0.01, 0.0]))
    assert tracking_term(q, IDQ, 0.01, orientation=True) == pytest.approx(math.exp(-1), abs=1e-9)


def test_batched_breakdown():
    B = 5
    rb = compute_reward(
        np.zeros((B, 3)), np.tile(IDQ, (B, 1)), np.tile(HOME, (B, 1)), np.zeros((B, 3)), np.tile(IDQ, (B, 1)),
        np.tile(HOME, (B, 1)), np.zeros((B, 12)), np.zeros((B, 12)), np.zeros((B, 12)), np.zeros((B, 12)),
        np.zeros((B, 12)), np.array([0, 1, 2, 3, 3]), np.array([0, 0, 0, 0, 1], bool),
    )
    np.testing.assert_allclose(rb.total, [9, 9, 9, 9, -1])


@pytest.mark.parametrize("kw", [{"sigma_joint_sf": 0.0}, {"w_joint": -1.0}, {"w_torque": 1.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RewardConfig(**kw)


def test_config_from_dict():
    assert RewardConfig.from_dict({"sigma_joint_landing": 3.0}).sigma_joint_landing == 3.0
    with pytest.raises(KeyError):
        RewardConfig.from_dict({"sigma": 1.0})
