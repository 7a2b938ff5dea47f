"""Line-of-sight optical channel, interference and IM/DD achievable rate.

The transmitter is a generalized Lambertian emitter pointing straight down;
a high Lambertian order stands in for a directional VCSEL beam. The
receiver normal is set by the device tilt ``theta`` and azimuth ``phi``.

Array functions (``*_matrix`` / ``*_array``) take an (n, 6) state array and
are what the experiments use; the scalar functions wrap them.
"""

from __future__ import annotations

import math

import numpy as np

from .core import AccessPoint, InvalidGeometry, MobilityState, NotFound, ReceiverConfig, RoomGeometry, Scenario


def receiver_normal(theta, phi) -> np.ndarray:
    """Unit normal ``(sin t cos p, sin t sin p, cos t)``; broadcasts over arrays."""
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta) + 0.0 * np.asarray(phi)], axis=-1)


def _gain_core(ap_pos: np.ndarray, m: float, states: np.ndarray, rx: ReceiverConfig) -> np.ndarray:
    dx = ap_pos[0] - states[:, 0]
    dy = ap_pos[1] - states[:, 1]
    dz = ap_pos[2] - rx.height
    d2 = dx * dx + dy * dy + dz * dz
    if np.any(d2 == 0.0):
        raise InvalidGeometry("receiver coincides with access point")
    d = np.sqrt(d2)
    cos_tx = dz / d
    n = receiver_normal(states[:, 4], states[:, 5])
    cos_rx = (n[:, 0] * dx + n[:, 1] * dy + n[:, 2] * dz) / d
    visible = (cos_rx > 0.0) & (cos_rx >= math.cos(rx.fov_half_angle)) & (cos_tx > 0.0)
    g = (m + 1.0) * rx.area / (2.0 * math.pi * d2) * np.power(np.maximum(cos_tx, 0.0), m) * cos_rx
    return np.where(visible, g, 0.0)


def gain_matrix(states: np.ndarray, scenario: Scenario) -> np.ndarray:
    """LOS gains of every AP for every state: shape (n, n_aps), columns in ``scenario.aps`` order."""
    s = np.array(states, dtype=float, ndmin=2)
    cols = [
        _gain_core(np.asarray(ap.position), ap.lambertian_order, s, scenario.receiver)
        for ap in scenario.aps
    ]
    return np.stack(cols, axis=1)


def los_gain(ap: AccessPoint, state: MobilityState, rx: ReceiverConfig, room: RoomGeometry) -> float:
    if not rx.height < room.H:
        raise InvalidGeometry("receiver must be below the ceiling")
    return float(_gain_core(np.asarray(ap.position), ap.lambertian_order, state.as_array()[None, :], rx)[0])


def _powers(scenario: Scenario) -> np.ndarray:
    return np.array([ap.transmit_power for ap in scenario.aps])


def interference_array(gains: np.ndarray, serving_idx: np.ndarray, scenario: Scenario) -> np.ndarray:
    """Full-reuse interference current variance for each row of ``gains``."""
    currents = (_powers(scenario) * scenario.receiver.responsivity * gains) ** 2
    rows = np.arange(len(gains))
    return currents.sum(axis=1) - currents[rows, serving_idx]


def interference(state: MobilityState, serving_ap_id: int, scenario: Scenario) -> float:
    idx = _ap_index(serving_ap_id, scenario)
    g = gain_matrix(state.as_array(), scenario)
    currents = (_powers(scenario) * scenario.receiver.responsivity * g[0]) ** 2
    return float(sum(c for i, c in enumerate(currents) if i != idx))


def _ap_index(ap_id: int, scenario: Scenario) -> int:
    for i, ap in enumerate(scenario.aps):
        if ap.id == ap_id:
            return i
    raise NotFound(f"no AP with id {ap_id}")


def rate_from(gain, interf, transmit_power, scenario: Scenario):
    signal = (transmit_power * scenario.receiver.responsivity * gain) ** 2
    return scenario.noise.bandwidth * np.log2(1.0 + signal / (scenario.noise.noise_variance + interf))


def data_rate(gain: float, interference: float, scenario: Scenario, *, ap_id: int | None = None) -> float:
    """Achievable IM/DD rate in bit/s for the serving AP (first AP when ``ap_id`` is None)."""
    if interference < 0:
        raise ValueError("interference must be non-negative")
    ap = scenario.aps[0] if ap_id is None else scenario.ap_by_id(ap_id)
    return float(rate_from(gain, interference, ap.transmit_power, scenario))


def _id_order(scenario: Scenario) -> np.ndarray:
    return np.argsort([ap.id for ap in scenario.aps], kind="stable")


def associate_array(gains: np.ndarray, scenario: Scenario) -> np.ndarray:
    """Column index of the max-gain AP per row; ties go to the lowest AP id."""
    order = _id_order(scenario)
    return order[np.argmax(gains[:, order], axis=1)]


def associate(state: MobilityState, scenario: Scenario) -> int:
    idx = associate_array(gain_matrix(state.as_array(), scenario), scenario)[0]
    return scenario.aps[idx].id


def realized_rate_array(states: np.ndarray, serving_idx: np.ndarray, scenario: Scenario) -> np.ndarray:
    """Rate experienced at ``states`` when served by AP columns ``serving_idx``."""
    g = gain_matrix(states, scenario)
    rows = np.arange(len(g))
    interf = interference_array(g, serving_idx, scenario)
    return rate_from(g[rows, serving_idx], interf, _powers(scenario)[serving_idx], scenario)
