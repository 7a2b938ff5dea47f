"""Mobility models: Gauss-Markov, Random Waypoint and the behavioural ground truth.

The Gauss-Markov recursion is written once, as array kernels, and shared by
the stochastic simulator (:func:`gm_step`, :func:`generate_ground_truth`) and
the deterministic predictor (:func:`gm_predict`). Sharing the code path is
what makes a noise-free ground truth reproducible bit-for-bit by the
predictor.

Per component the update is ``s' = a*s + (1-a)*mean + sqrt(1-a^2)*sigma*w``.
The heading has no global mean (its mean is the current heading, so it is a
correlated random walk), tilt reverts to ``mean_theta`` and device azimuth
reverts towards the heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from .core import (
    HALF_PI,
    InvalidArgument,
    MobilityState,
    RoomGeometry,
    Scenario,
    Trajectory,
    wrap_angle,
)

DEFAULT_ROOM = RoomGeometry()
DEFAULT_TICK = 0.01


@dataclass(frozen=True)
class GmParams:
    alpha_v: float = 0.95
    alpha_psi: float = 0.95
    alpha_theta: float = 0.95
    alpha_phi: float = 0.95
    mean_v: float = 1.0
    mean_theta: float = math.radians(41.0)
    sigma_v: float = 0.1
    sigma_psi: float = 0.03
    sigma_theta: float = 0.03
    sigma_phi: float = 0.03

    def __post_init__(self):
        for name in ("alpha_v", "alpha_psi", "alpha_theta", "alpha_phi"):
            a = getattr(self, name)
            if not 0.0 <= a <= 1.0:
                raise InvalidArgument(f"{name} must lie in [0, 1], got {a}")
        for name in ("sigma_v", "sigma_psi", "sigma_theta", "sigma_phi"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be >= 0")
        if self.mean_v < 0:
            raise InvalidArgument("mean_v must be >= 0")


@dataclass(frozen=True)
class RwpParams:
    v_min: float = 0.2
    v_max: float = 1.6
    pause_max: float = 2.0
    orient_jitter: float = 0.01

    def __post_init__(self):
        if not 0 < self.v_min <= self.v_max:
            raise InvalidArgument("need 0 < v_min <= v_max")
        if self.pause_max < 0 or self.orient_jitter < 0:
            raise InvalidArgument("pause_max and orient_jitter must be >= 0")


@dataclass(frozen=True)
class BehaviourParams:
    """Behavioural variations layered on top of the GM process.

    Events arrive as a Poisson process. A turn event changes heading over
    ``transition_time`` and re-grips the device (a tilt/azimuth jump played
    out over ``regrip_time``); a stop event ramps the user down to rest for
    an exponentially distributed dwell and back up. While walking, the
    handheld device sways with an amplitude of ``sway_base`` rad plus
    ``sway_amplitude`` rad per m/s of speed. The azimuth swings at the stride
    rate (half of ``sway_frequency``); the tilt bobs at the step rate with
    ``sway_tilt_ratio`` times that amplitude. The gait phase diffuses at
    ``sway_phase_noise`` rad/sqrt(s), so the sway is only quasi-periodic.
    """

    event_rate: float = 1.0
    turn_sigma: float = math.pi / 4
    pause_prob: float = 0.2
    reorient_sigma: float = 0.4
    transition_time: float = 0.6
    regrip_time: float = 0.15
    dwell_mean: float = 1.0
    sway_base: float = 0.05
    sway_amplitude: float = 0.1
    sway_frequency: float = 1.8
    sway_phase_noise: float = 0.5
    sway_tilt_ratio: float = 0.3

    def __post_init__(self):
        if self.event_rate < 0:
            raise InvalidArgument("event_rate must be >= 0")
        if not 0.0 <= self.pause_prob <= 1.0:
            raise InvalidArgument("pause_prob must lie in [0, 1]")
        if self.turn_sigma < 0 or self.reorient_sigma < 0 or self.sway_amplitude < 0 or self.sway_base < 0:
            raise InvalidArgument("sigmas and sway amplitude must be >= 0")
        if self.transition_time < 0 or self.regrip_time < 0 or self.dwell_mean <= 0:
            raise InvalidArgument("ramp times must be >= 0 and dwell_mean > 0")
        if self.sway_frequency <= 0 or self.sway_phase_noise < 0 or self.sway_tilt_ratio < 0:
            raise InvalidArgument("sway_frequency must be positive; sway_phase_noise and sway_tilt_ratio >= 0")


@dataclass
class RwpWaypoint:
    """Target, leg speed and remaining pause of the current RWP leg."""

    x: float
    y: float
    speed: float
    pause_left: float = 0.0


# ---------------------------------------------------------------------------
# Array kernels
# ---------------------------------------------------------------------------

def reflect_boundary(x, y, psi, room: RoomGeometry):
    """Specular reflection at the room walls, repeated until inside.

    Accepts scalars or equally shaped arrays; returns the same kind.
    """
    scalar = np.ndim(x) == 0
    x = np.array(x, dtype=float, ndmin=1)
    y = np.array(y, dtype=float, ndmin=1)
    psi = np.array(psi, dtype=float, ndmin=1)
    for _ in range(64):
        lo_x, hi_x = x < 0.0, x > room.L
        lo_y, hi_y = y < 0.0, y > room.W
        bad_x = lo_x | hi_x
        bad_y = lo_y | hi_y
        if not (bad_x.any() or bad_y.any()):
            break
        x = np.where(lo_x, -x, np.where(hi_x, 2.0 * room.L - x, x))
        y = np.where(lo_y, -y, np.where(hi_y, 2.0 * room.W - y, y))
        psi = np.where(bad_x, wrap_angle(math.pi - psi), psi)
        psi = np.where(bad_y, wrap_angle(-psi), psi)
    else:  # pragma: no cover - only reachable with absurd step lengths
        x = np.clip(x, 0.0, room.L)
        y = np.clip(y, 0.0, room.W)
    if scalar:
        return float(x[0]), float(y[0]), float(psi[0])
    return x, y, psi


def _gm_kinematics(v, psi, theta, phi, p: GmParams, w):
    """One noisy GM update of (v, psi, theta, phi); ``w`` has shape (..., 4)."""
    cv = np.sqrt(1.0 - p.alpha_v ** 2) * p.sigma_v
    cpsi = np.sqrt(1.0 - p.alpha_psi ** 2) * p.sigma_psi
    ctheta = np.sqrt(1.0 - p.alpha_theta ** 2) * p.sigma_theta
    cphi = np.sqrt(1.0 - p.alpha_phi ** 2) * p.sigma_phi
    v1 = p.alpha_v * v + (1.0 - p.alpha_v) * p.mean_v + cv * w[..., 0]
    v1 = np.maximum(v1, 0.0)
    psi1 = wrap_angle(psi + cpsi * w[..., 1])
    theta1 = p.alpha_theta * theta + (1.0 - p.alpha_theta) * p.mean_theta + ctheta * w[..., 2]
    theta1 = np.clip(theta1, 0.0, HALF_PI)
    phi1 = wrap_angle(phi + (1.0 - p.alpha_phi) * wrap_angle(psi - phi) + cphi * w[..., 3])
    return v1, psi1, theta1, phi1


def _integrate(x, y, v, psi, tick: float, room: RoomGeometry):
    x1 = x + v * tick * np.cos(psi)
    y1 = y + v * tick * np.sin(psi)
    return reflect_boundary(x1, y1, psi, room)


def gm_step_array(states: np.ndarray, params: GmParams, w: np.ndarray, tick: float = DEFAULT_TICK,
                  room: RoomGeometry = DEFAULT_ROOM) -> np.ndarray:
    """Advance an (n, 6) batch of states by one tick with given unit normals ``w`` (n, 4)."""
    s = np.asarray(states, dtype=float)
    v1, psi1, theta1, phi1 = _gm_kinematics(s[:, 2], s[:, 3], s[:, 4], s[:, 5], params, np.asarray(w, dtype=float))
    x1, y1, psi1 = _integrate(s[:, 0], s[:, 1], v1, psi1, tick, room)
    return np.stack([x1, y1, v1, psi1, theta1, phi1], axis=1)


def gm_predict_array(states: np.ndarray, params: GmParams, n_steps: int, tick: float = DEFAULT_TICK,
                     room: RoomGeometry = DEFAULT_ROOM) -> np.ndarray:
    """Noise-free GM rollout of an (n, 6) batch."""
    if n_steps < 1:
        raise InvalidArgument("n_steps must be >= 1")
    s = np.array(states, dtype=float, ndmin=2)
    zeros = np.zeros((len(s), 4))
    for _ in range(n_steps):
        s = gm_step_array(s, params, zeros, tick, room)
    return s


def rwp_predict_array(states: np.ndarray, n_steps: int, tick: float = DEFAULT_TICK,
                      room: RoomGeometry = DEFAULT_ROOM) -> np.ndarray:
    """Dead reckoning along the current (v, psi); orientation held."""
    if n_steps < 1:
        raise InvalidArgument("n_steps must be >= 1")
    s = np.array(states, dtype=float, ndmin=2)
    x, y, psi = s[:, 0], s[:, 1], s[:, 3]
    v = s[:, 2]
    for _ in range(n_steps):
        x, y, psi = _integrate(x, y, v, psi, tick, room)
    out = s.copy()
    out[:, 0], out[:, 1], out[:, 3] = x, y, psi
    return out


# ---------------------------------------------------------------------------
# Scalar API
# ---------------------------------------------------------------------------

def gm_step(state: MobilityState, params: GmParams, rng: np.random.Generator, *,
            tick: float = DEFAULT_TICK, room: RoomGeometry = DEFAULT_ROOM) -> MobilityState:
    w = rng.standard_normal((1, 4))
    return MobilityState.from_array(gm_step_array(state.as_array()[None, :], params, w, tick, room)[0])


def gm_predict(state: MobilityState, params: GmParams, n_steps: int, *,
               tick: float = DEFAULT_TICK, room: RoomGeometry = DEFAULT_ROOM) -> MobilityState:
    """Expected-value GM rollout: ``gm_step`` with every noise draw set to zero."""
    return MobilityState.from_array(gm_predict_array(state.as_array(), params, n_steps, tick, room)[0])


def rwp_predict(state: MobilityState, n_steps: int, *, tick: float = DEFAULT_TICK,
                room: RoomGeometry = DEFAULT_ROOM) -> MobilityState:
    return MobilityState.from_array(rwp_predict_array(state.as_array(), n_steps, tick, room)[0])


def _rwp_new_leg(x: float, y: float, params: RwpParams, rng: np.random.Generator, room: RoomGeometry):
    pause = rng.uniform(0.0, params.pause_max) if params.pause_max > 0 else 0.0
    wx = rng.uniform(0.0, room.L)
    wy = rng.uniform(0.0, room.W)
    speed = rng.uniform(params.v_min, params.v_max)
    theta = rng.uniform(0.0, HALF_PI)
    phi = wrap_angle(rng.uniform(-math.pi, math.pi))
    psi = math.atan2(wy - y, wx - x) if (wx, wy) != (x, y) else 0.0
    return RwpWaypoint(wx, wy, speed, pause), wrap_angle(psi), theta, phi


def rwp_step(state: MobilityState, waypoint: RwpWaypoint, params: RwpParams, rng: np.random.Generator, *,
             tick: float = DEFAULT_TICK, room: RoomGeometry = DEFAULT_ROOM) -> tuple[MobilityState, RwpWaypoint]:
    """One RWP tick. Returns the new state and the (possibly new) waypoint."""
    jt, jp = rng.normal(0.0, params.orient_jitter, size=2) if params.orient_jitter > 0 else (0.0, 0.0)
    theta = min(max(state.theta + jt, 0.0), HALF_PI)
    phi = wrap_angle(state.phi + jp)

    if waypoint.pause_left > 0:
        left = max(waypoint.pause_left - tick, 0.0)
        wp = RwpWaypoint(waypoint.x, waypoint.y, waypoint.speed, left)
        v = wp.speed if left == 0 else 0.0
        return MobilityState(state.x, state.y, v, state.psi, theta, phi), wp

    dx, dy = waypoint.x - state.x, waypoint.y - state.y
    dist = math.hypot(dx, dy)
    step = waypoint.speed * tick
    if dist <= step:
        wp, psi, theta, phi = _rwp_new_leg(waypoint.x, waypoint.y, params, rng, room)
        v = 0.0 if wp.pause_left > 0 else wp.speed
        return MobilityState(waypoint.x, waypoint.y, v, psi, theta, phi), wp

    x = state.x + step * dx / dist
    y = state.y + step * dy / dist
    psi = wrap_angle(math.atan2(dy, dx))
    return MobilityState(x, y, waypoint.speed, psi, theta, phi), waypoint


def generate_rwp_trajectory(scenario: Scenario, params: RwpParams, duration: float,
                            rng: np.random.Generator) -> Trajectory:
    n = _n_states(duration, scenario.tick)
    room = scenario.room
    x0, y0 = rng.uniform(0.0, room.L), rng.uniform(0.0, room.W)
    wp, psi, theta, phi = _rwp_new_leg(x0, y0, params, rng, room)
    wp.pause_left = 0.0
    state = MobilityState(x0, y0, wp.speed, psi, theta, phi)
    rows = [state.as_array()]
    for _ in range(n - 1):
        state, wp = rwp_step(state, wp, params, rng, tick=scenario.tick, room=room)
        rows.append(state.as_array())
    return Trajectory(scenario.tick, np.array(rows))


# ---------------------------------------------------------------------------
# Ground truth with behavioural variations
# ---------------------------------------------------------------------------

def _n_states(duration: float, tick: float) -> int:
    if duration < tick * (1 - 1e-9):
        raise InvalidArgument(f"duration {duration} s is shorter than one tick ({tick} s)")
    return int(math.floor(duration / tick + 1e-9)) + 1


@dataclass
class _Plan:
    """Pre-drawn randomness of one realization."""

    init: np.ndarray
    noise: np.ndarray  # (n_steps, 4) unit normals for the GM update
    inc: np.ndarray    # (n_steps, 3) psi, theta, phi ramp increments
    gate: np.ndarray   # (n_steps,) speed multiplier after each step
    sway: np.ndarray   # (n_steps, 2) sway waveforms for theta, phi (per unit amplitude)


def _ramp_ticks(seconds: float, tick: float) -> int:
    return max(1, int(round(seconds / tick)))


def _draw_plan(scenario: Scenario, gm: GmParams, beh: BehaviourParams, n_steps: int,
               rng: np.random.Generator) -> _Plan:
    room, tick = scenario.room, scenario.tick
    x = rng.uniform(0.1 * room.L, 0.9 * room.L)
    y = rng.uniform(0.1 * room.W, 0.9 * room.W)
    psi = wrap_angle(rng.uniform(-math.pi, math.pi))
    init = np.array([x, y, gm.mean_v, psi, min(gm.mean_theta, HALF_PI), psi])
    noise = rng.standard_normal((n_steps, 4))

    freq = beh.sway_frequency * rng.uniform(0.8, 1.2)
    steps = 2.0 * math.pi * freq * tick + beh.sway_phase_noise * math.sqrt(tick) * rng.standard_normal(n_steps)
    phase = rng.uniform(0.0, 2.0 * math.pi) + np.cumsum(steps)
    sway = np.stack([beh.sway_tilt_ratio * np.sin(phase), np.sin(0.5 * phase)], axis=1)

    inc = np.zeros((n_steps, 3))
    gate = np.ones(n_steps)
    turn = _ramp_ticks(beh.transition_time, tick)
    regrip = _ramp_ticks(beh.regrip_time, tick)
    if beh.event_rate > 0:
        t = 0.0
        horizon = n_steps * tick
        while True:
            t += rng.exponential(1.0 / beh.event_rate)
            if t >= horizon:
                break
            k0 = int(t / tick)
            if rng.random() < beh.pause_prob:
                dwell = int(round(rng.exponential(beh.dwell_mean) / tick))
                down = 1.0 - np.arange(1, turn + 1) / turn
                up = np.arange(1, turn + 1) / turn
                profile = np.concatenate([down, np.zeros(dwell), up])
                seg = gate[k0:k0 + len(profile)]
                gate[k0:k0 + len(profile)] = np.minimum(seg, profile[:len(seg)])
            else:
                jumps = np.clip([
                    rng.normal(0.0, beh.turn_sigma),
                    rng.normal(0.0, beh.reorient_sigma),
                    rng.normal(0.0, beh.reorient_sigma),
                ], -math.pi, math.pi)
                inc[k0:k0 + turn, 0] += jumps[0] / turn
                inc[k0:k0 + regrip, 1:] += jumps[1:] / regrip
    return _Plan(init, noise, inc, gate, sway)


def _stack_params(params: list[GmParams]) -> SimpleNamespace:
    names = [f.name for f in fields(GmParams)]
    return SimpleNamespace(**{n: np.array([getattr(p, n) for p in params]) for n in names})


def generate_ground_truth_batch(scenario: Scenario, gm: GmParams | Sequence[GmParams], beh: BehaviourParams,
                                duration: float, rngs: list[np.random.Generator]) -> list[Trajectory]:
    """Simulate one realization per generator, vectorised across realizations.

    ``gm`` is shared or given per realization. Each realization consumes
    only its own generator, so its trajectory does not depend on which other
    realizations share the batch.
    """
    n = _n_states(duration, scenario.tick)
    steps = n - 1
    per = [gm] * len(rngs) if isinstance(gm, GmParams) else list(gm)
    if len(per) != len(rngs):
        raise InvalidArgument("need one GmParams per generator")
    plans = [_draw_plan(scenario, p, beh, steps, r) for p, r in zip(per, rngs)]
    if not isinstance(gm, GmParams):
        gm = _stack_params(per)
    R = len(plans)
    out = np.empty((R, n, 6))
    s = np.stack([p.init for p in plans])
    out[:, 0] = s
    if steps:
        noise = np.stack([p.noise for p in plans], axis=1)  # (steps, R, 4)
        inc = np.stack([p.inc for p in plans], axis=1)      # (steps, R, 3)
        gate = np.stack([p.gate for p in plans], axis=1)    # (steps, R)
        sway = np.stack([p.sway for p in plans], axis=1)  # (steps, R, 2)
    room, tick = scenario.room, scenario.tick
    # latent kinematics; emitted speed is gated, emitted orientation carries sway
    v_lat = s[:, 2].copy()
    x, y, psi, theta_lat, phi_lat = s[:, 0], s[:, 1], s[:, 3], s[:, 4], s[:, 5]
    for k in range(steps):
        v_lat, psi, theta_lat, phi_lat = _gm_kinematics(v_lat, psi, theta_lat, phi_lat, gm, noise[k])
        d = inc[k]
        if d.any():
            psi = wrap_angle(psi + d[:, 0])
            theta_lat = np.clip(theta_lat + d[:, 1], 0.0, HALF_PI)
            phi_lat = wrap_angle(phi_lat + d[:, 2])
        v = v_lat * gate[k]
        x, y, psi = _integrate(x, y, v, psi, tick, room)
        if beh.sway_amplitude > 0 or beh.sway_base > 0:
            amp = (beh.sway_base + beh.sway_amplitude * v)[:, None] * sway[k]
            theta = np.clip(theta_lat + amp[:, 0], 0.0, HALF_PI)
            phi = wrap_angle(phi_lat + amp[:, 1])
        else:
            theta, phi = theta_lat, phi_lat
        out[:, k + 1, 0] = x
        out[:, k + 1, 1] = y
        out[:, k + 1, 2] = v
        out[:, k + 1, 3] = psi
        out[:, k + 1, 4] = theta
        out[:, k + 1, 5] = phi
    return [Trajectory(tick, out[r]) for r in range(R)]


def generate_ground_truth(scenario: Scenario, gm: GmParams, beh: BehaviourParams, duration: float,
                          rng: np.random.Generator) -> Trajectory:
    return generate_ground_truth_batch(scenario, gm, beh, duration, [rng])[0]
