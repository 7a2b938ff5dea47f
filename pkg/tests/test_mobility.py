import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from owc_mobility.core import InvalidArgument, MobilityState, RoomGeometry, Scenario, seeded_rng
from owc_mobility.mobility import (
    BehaviourParams,
    GmParams,
    RwpParams,
    RwpWaypoint,
    generate_ground_truth,
    generate_ground_truth_batch,
    generate_rwp_trajectory,
    gm_predict,
    gm_predict_array,
    gm_step,
    gm_step_array,
    reflect_boundary,
    rwp_predict,
    rwp_step,
)

ROOM = RoomGeometry()
NOISE_FREE = GmParams(sigma_v=0.0, sigma_psi=0.0, sigma_theta=0.0, sigma_phi=0.0)
QUIET = BehaviourParams(event_rate=0.0, sway_base=0.0, sway_amplitude=0.0)


def _state(**kw):
    base = dict(x=2.5, y=2.5, v=1.0, psi=0.3, theta=0.7, phi=-0.2)
    base.update(kw)
    return MobilityState(**base)


def _step_v(alpha, v, mean, w):
    p = GmParams(alpha_v=alpha, mean_v=mean)
    s = _state(v=v).as_array()[None]
    return gm_step_array(s, p, np.array([[w, 0.0, 0.0, 0.0]]))[0, 2]


# GM step / predict -----------------------------------------------------------

def test_gm_step_full_memory_ignores_noise():
    assert _step_v(1.0, 0.8, 0.5, 3.7) == 0.8


def test_gm_step_memoryless_goes_to_mean():
    assert _step_v(0.0, 1.3, 0.5, 0.0) == 0.5


def test_gm_step_hand_value():
    assert _step_v(0.75, 1.0, 0.5, 0.0) == pytest.approx(0.875, abs=1e-15)


def test_gm_predict_full_memory_keeps_speed():
    s = _state(v=0.8)
    assert gm_predict(s, GmParams(alpha_v=1.0), 1).v == 0.8


def test_gm_predict_two_steps():
    s = _state(v=1.0)
    assert gm_predict(s, GmParams(alpha_v=0.75, mean_v=0.5), 2).v == pytest.approx(0.78125, abs=1e-15)


def test_gm_predict_independent_of_sigmas():
    s = _state()
    a = gm_predict(s, GmParams(), 25)
    b = gm_predict(s, GmParams(sigma_v=2.0, sigma_psi=1.0, sigma_theta=0.5, sigma_phi=0.9), 25)
    assert a == b


def test_gm_step_with_zero_sigmas_equals_one_step_prediction():
    s = _state()
    assert gm_step(s, NOISE_FREE, seeded_rng(3)) == gm_predict(s, NOISE_FREE, 1)


def test_gm_predict_rejects_zero_steps():
    with pytest.raises(InvalidArgument):
        gm_predict(_state(), GmParams(), 0)


def test_gm_params_validation():
    with pytest.raises(InvalidArgument):
        GmParams(alpha_v=1.5)
    with pytest.raises(InvalidArgument):
        GmParams(sigma_phi=-0.1)
    with pytest.raises(InvalidArgument):
        GmParams(mean_v=-1.0)


@pytest.mark.parametrize("alpha", [0.3, 0.95])
def test_gm_speed_stationary_moments(alpha):
    # pure speed recursion, far from the v >= 0 clamp
    p = GmParams(alpha_v=alpha, mean_v=1.0, sigma_v=0.1)
    rng = seeded_rng(7, int(alpha * 100))
    w = rng.standard_normal(200_000)
    v = np.empty_like(w)
    x = 1.0
    c = math.sqrt(1 - alpha ** 2) * p.sigma_v
    for i, wi in enumerate(w):
        x = alpha * x + (1 - alpha) * p.mean_v + c * wi
        v[i] = x
    assert v.mean() == pytest.approx(1.0, rel=0.01)
    assert v.var() == pytest.approx(0.01, rel=0.05)


@settings(max_examples=60, deadline=None)
@given(
    x=st.floats(0, 5), y=st.floats(0, 5), v=st.floats(0, 3), psi=st.floats(-3.14, 3.14),
    theta=st.floats(0, 1.57), phi=st.floats(-3.14, 3.14), n=st.integers(1, 60), seed=st.integers(0, 1000),
)
def test_gm_outputs_are_valid_states(x, y, v, psi, theta, phi, n, seed):
    s = MobilityState(x, y, v, psi, theta, phi)
    gm_predict(s, GmParams(), n).check(ROOM, tol=1e-9)
    rng = seeded_rng(seed)
    for _ in range(5):
        s = gm_step(s, GmParams(sigma_v=1.0, sigma_psi=1.0, sigma_theta=1.0, sigma_phi=1.0), rng)
        s.check(ROOM, tol=1e-9)


# boundary reflection -----------------------------------------------------------

def test_reflect_left_wall():
    x, y, psi = reflect_boundary(-0.1, 2.0, math.pi, ROOM)
    assert (x, y) == pytest.approx((0.1, 2.0))
    assert psi == pytest.approx(0.0, abs=1e-15)


def test_reflect_right_wall():
    x, y, psi = reflect_boundary(5.2, 2.0, 0.0, ROOM)
    assert (x, y) == pytest.approx((4.8, 2.0))
    assert psi == pytest.approx(math.pi)


def test_reflect_interior_unchanged():
    assert reflect_boundary(1.0, 2.0, 0.4, ROOM) == (1.0, 2.0, 0.4)


def test_reflect_corner_and_arrays():
    x, y, psi = reflect_boundary(np.array([-0.2, 2.0]), np.array([5.3, 1.0]), np.array([2.0, 0.1]), ROOM)
    np.testing.assert_allclose(x, [0.2, 2.0])
    np.testing.assert_allclose(y, [4.7, 1.0])
    assert psi[1] == 0.1


# RWP ---------------------------------------------------------------------------

def test_rwp_step_moves_toward_waypoint():
    s = MobilityState(0.0, 0.0, 1.0, 0.0, 0.5, 0.0)
    new, wp = rwp_step(s, RwpWaypoint(3.0, 4.0, 1.0), RwpParams(orient_jitter=0.0), seeded_rng(0), tick=0.1)
    assert (new.x, new.y) == pytest.approx((0.06, 0.08), abs=1e-12)
    assert wp == RwpWaypoint(3.0, 4.0, 1.0)


def test_rwp_arrival_draws_new_waypoint_without_moving():
    s = MobilityState(3.0, 4.0, 1.0, 0.0, 0.5, 0.0)
    old = RwpWaypoint(3.0, 4.0, 1.0)
    new, wp = rwp_step(s, old, RwpParams(pause_max=0.0), seeded_rng(0))
    assert (new.x, new.y) == (3.0, 4.0)
    assert (wp.x, wp.y) != (3.0, 4.0)
    assert wp.pause_left == 0.0


def test_rwp_degenerate_speed_range():
    tr = generate_rwp_trajectory(Scenario(), RwpParams(v_min=1.0, v_max=1.0, pause_max=0.0), 30.0, seeded_rng(5))
    assert set(np.unique(tr.states[:, 2])) == {1.0}


def test_rwp_trajectory_valid_and_deterministic():
    a = generate_rwp_trajectory(Scenario(), RwpParams(), 20.0, seeded_rng(9))
    b = generate_rwp_trajectory(Scenario(), RwpParams(), 20.0, seeded_rng(9))
    a.check(ROOM)
    np.testing.assert_array_equal(a.states, b.states)


def test_rwp_predict_stationary_user():
    s = _state(v=0.0)
    assert rwp_predict(s, 10) == s


def test_rwp_predict_dead_reckoning():
    s = MobilityState(1.0, 2.0, 1.0, 0.0, 0.3, 0.4)
    p = rwp_predict(s, 10, tick=0.01)
    assert p.x == pytest.approx(1.1, abs=1e-12)
    assert p.y == 2.0
    assert (p.v, p.psi, p.theta, p.phi) == (1.0, 0.0, 0.3, 0.4)


# ground truth --------------------------------------------------------------------

def test_ground_truth_length():
    tr = generate_ground_truth(Scenario(), GmParams(), BehaviourParams(), 60.0, seeded_rng(1))
    assert len(tr) == 6001


def test_ground_truth_rejects_short_duration():
    with pytest.raises(InvalidArgument):
        generate_ground_truth(Scenario(), GmParams(), BehaviourParams(), 0.001, seeded_rng(1))


def test_degenerate_ground_truth_is_straight_line_until_wall():
    gm = replace(NOISE_FREE, alpha_v=1.0, alpha_psi=1.0, alpha_theta=1.0, alpha_phi=1.0)
    tr = generate_ground_truth(Scenario(), gm, QUIET, 30.0, seeded_rng(2))
    s = tr.states
    np.testing.assert_array_equal(s[:, 2], s[0, 2])
    np.testing.assert_array_equal(s[:, 4], s[0, 4])
    # before the first reflection the heading is constant and steps are equal
    first = np.flatnonzero(s[:, 3] != s[0, 3])
    end = first[0] if len(first) else len(s)
    assert end > 2
    d = np.diff(s[:end, :2], axis=0)
    np.testing.assert_allclose(d, np.tile(d[0], (len(d), 1)), atol=1e-12)


def test_noise_free_ground_truth_matches_gm_prediction_exactly():
    sc = Scenario()
    tr = generate_ground_truth(sc, NOISE_FREE, QUIET, 5.0, seeded_rng(4))
    s = tr.states
    for n in (1, 10, 50):
        pred = gm_predict_array(s[:-n], NOISE_FREE, n)
        np.testing.assert_array_equal(pred, s[n:])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), mean_v=st.floats(0.0, 2.0), rate=st.floats(0.0, 3.0))
def test_ground_truth_states_always_valid(seed, mean_v, rate):
    beh = BehaviourParams(event_rate=rate)
    tr = generate_ground_truth(Scenario(), GmParams(mean_v=mean_v), beh, 5.0, seeded_rng(seed))
    tr.check(ROOM)


def test_ground_truth_deterministic_and_batch_independent():
    sc = Scenario()
    a = generate_ground_truth(sc, GmParams(), BehaviourParams(), 10.0, seeded_rng(42, 3))
    batch = generate_ground_truth_batch(sc, GmParams(), BehaviourParams(), 10.0,
                                        [seeded_rng(42, 2), seeded_rng(42, 3)])
    np.testing.assert_array_equal(a.states, batch[1].states)


def test_ground_truth_per_realization_params():
    sc = Scenario()
    slow, fast = GmParams(mean_v=0.2), GmParams(mean_v=1.6)
    batch = generate_ground_truth_batch(sc, [slow, fast], BehaviourParams(), 20.0, [seeded_rng(1), seeded_rng(2)])
    single = generate_ground_truth(sc, fast, BehaviourParams(), 20.0, seeded_rng(2))
    np.testing.assert_allclose(batch[1].states, single.states, rtol=0, atol=1e-12)
    assert batch[0].states[:, 2].mean() < batch[1].states[:, 2].mean()


def test_behaviour_validation():
    with pytest.raises(InvalidArgument):
        BehaviourParams(pause_prob=1.5)
    with pytest.raises(InvalidArgument):
        BehaviourParams(sway_base=-0.1)
    with pytest.raises(InvalidArgument):
        BehaviourParams(sway_frequency=0.0)


def test_zero_tilt_ratio_sways_azimuth_only():
    sc = Scenario()
    swaying = BehaviourParams(event_rate=0.0, sway_tilt_ratio=0.0)
    a = generate_ground_truth(sc, NOISE_FREE, swaying, 3.0, seeded_rng(3)).states
    b = generate_ground_truth(sc, NOISE_FREE, QUIET, 3.0, seeded_rng(3)).states
    np.testing.assert_array_equal(a[:, 4], b[:, 4])
    assert np.abs(a[:, 5] - b[:, 5]).max() > 0.01
    with pytest.raises(InvalidArgument):
        BehaviourParams(sway_tilt_ratio=-1.0)
