"""Hybrid GM + LSTM predictor.

The GM rollout gives a baseline for the state ``horizon_steps`` ticks ahead;
an LSTM fed the last ``k`` states predicts the residual between the true
future state and that baseline. Residuals live in raw state units
(m, m/s, rad), with wrap-aware angle arithmetic on both sides.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .channel import associate_array, gain_matrix, interference_array, rate_from
from .core import (
    HALF_PI,
    FormatError,
    InvalidArgument,
    MobilityState,
    RoomGeometry,
    Scenario,
    Trajectory,
    angle_diff,
    seeded_rng,
    wrap_angle,
)
from .mobility import (
    DEFAULT_ROOM,
    DEFAULT_TICK,
    BehaviourParams,
    GmParams,
    generate_ground_truth_batch,
    gm_predict_array,
)

log = logging.getLogger(__name__)

N_FEATURES = 8
# network input: the per-state features plus the GM mean speed the baseline reverts to
N_INPUTS = N_FEATURES + 1
N_TARGETS = 6
TARGET_SCALE_FLOOR = 1e-6

# RNG stream offsets; evaluation uses its own, disjoint range
CORPUS_SPEED_STREAM = 500_000
TRAIN_STREAM = 2_000_000


@dataclass(frozen=True)
class Architecture:
    hidden: int = 32
    layers: int = 2
    k: int = 10


def encode_features(state: MobilityState | np.ndarray, room: RoomGeometry) -> np.ndarray:
    """``[x/L, y/W, v, sin psi, cos psi, theta, sin phi, cos phi]``; vectorised over leading axes."""
    s = state.as_array() if isinstance(state, MobilityState) else np.asarray(state, dtype=float)
    return np.stack([
        s[..., 0] / room.L,
        s[..., 1] / room.W,
        s[..., 2],
        np.sin(s[..., 3]),
        np.cos(s[..., 3]),
        s[..., 4],
        np.sin(s[..., 5]),
        np.cos(s[..., 5]),
    ], axis=-1)


def model_inputs(windows_states: np.ndarray, mean_v, room: RoomGeometry) -> np.ndarray:
    """Encoded (N, k, 9) network inputs: state features plus the baseline's mean speed.

    ``mean_v`` is a scalar or one value per window. Without it a slow user and a
    fast user slowing into a pause look alike over a short history.
    """
    f = encode_features(windows_states, room)
    mv = np.broadcast_to(np.asarray(mean_v, dtype=float).reshape(-1, 1, 1), f.shape[:-1] + (1,))
    return np.concatenate([f, mv], axis=-1)


def residual(true_states: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    """Component-wise ``true - baseline`` with wrap-aware angles, shape (..., 6)."""
    t = np.asarray(true_states, dtype=float)
    b = np.asarray(baseline, dtype=float)
    out = t - b
    for j in (3, 4, 5):
        out[..., j] = angle_diff(t[..., j], b[..., j])
    return out


def apply_residual(baseline: np.ndarray, res: np.ndarray, room: RoomGeometry) -> np.ndarray:
    """Add residuals to baseline states and project back onto valid states."""
    out = np.array(baseline, dtype=float, ndmin=2)
    r = np.array(res, dtype=float, ndmin=2)
    out[:, 0] = np.clip(out[:, 0] + r[:, 0], 0.0, room.L)
    out[:, 1] = np.clip(out[:, 1] + r[:, 1], 0.0, room.W)
    out[:, 2] = np.maximum(out[:, 2] + r[:, 2], 0.0)
    out[:, 3] = wrap_angle(out[:, 3] + r[:, 3])
    out[:, 4] = np.clip(out[:, 4] + r[:, 4], 0.0, HALF_PI)
    out[:, 5] = wrap_angle(out[:, 5] + r[:, 5])
    return out


def history_windows(states: np.ndarray, k: int, indices: np.ndarray) -> np.ndarray:
    """Windows ``states[i-k+1 .. i]`` for each index, front-padded with ``states[0]``."""
    offs = np.arange(-k + 1, 1)
    idx = np.maximum(np.asarray(indices)[:, None] + offs[None, :], 0)
    return states[idx]


@dataclass
class ResidualDataset:
    """Windows of encoded features, residual targets, and the trajectory each came from."""

    windows: np.ndarray  # (N, k, 9)
    targets: np.ndarray  # (N, 6)
    groups: np.ndarray   # (N,) trajectory index
    k: int
    horizon_steps: int
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.targets)

    def normalization(self, rows: np.ndarray | None = None):
        """Per-feature and per-target mean/scale over ``rows`` (default: all)."""
        w = self.windows if rows is None else self.windows[rows]
        t = self.targets if rows is None else self.targets[rows]
        flat = w.reshape(-1, w.shape[-1])
        fm, fs = flat.mean(axis=0), flat.std(axis=0)
        tm, ts = t.mean(axis=0), t.std(axis=0)
        fs = np.where(fs > 1e-12, fs, 1.0)
        # below a micrometre / microradian the spread is round-off (e.g. CSV digits), not signal
        ts = np.where(ts > TARGET_SCALE_FLOOR, ts, 1.0)
        return fm, fs, tm, ts


def build_residual_dataset(trajectories: Sequence[Trajectory], gm: GmParams | Sequence[GmParams], k: int,
                           horizon_steps: int, *, room: RoomGeometry = DEFAULT_ROOM,
                           stride: int = 1) -> ResidualDataset:
    """Residual samples from every valid index of every trajectory.

    ``gm`` may be one parameter set or one per trajectory (e.g. when the
    corpus mixes mean speeds). Trajectories shorter than ``k + horizon_steps``
    are skipped and counted.
    """
    if k < 1 or horizon_steps < 1 or stride < 1:
        raise InvalidArgument("k, horizon_steps and stride must be >= 1")
    params = [gm] * len(trajectories) if isinstance(gm, GmParams) else list(gm)
    if len(params) != len(trajectories):
        raise InvalidArgument("need one GmParams per trajectory")
    windows, targets, groups = [], [], []
    skipped = 0
    for g, (traj, p) in enumerate(zip(trajectories, params)):
        s = traj.states
        if len(s) < k + horizon_steps:
            skipped += 1
            continue
        idx = np.arange(k - 1, len(s) - horizon_steps, stride)
        base = gm_predict_array(s[idx], p, horizon_steps, traj.tick, room)
        windows.append(model_inputs(history_windows(s, k, idx), p.mean_v, room))
        targets.append(residual(s[idx + horizon_steps], base))
        groups.append(np.full(len(idx), g))
    if skipped:
        log.warning("skipped %d trajectories shorter than k + horizon (%d)", skipped, k + horizon_steps)
    if not windows:
        return ResidualDataset(np.zeros((0, k, N_INPUTS)), np.zeros((0, N_TARGETS)), np.zeros(0, int),
                               k, horizon_steps, skipped)
    return ResidualDataset(np.concatenate(windows), np.concatenate(targets), np.concatenate(groups),
                           k, horizon_steps, skipped)


def split_groups(groups: np.ndarray, rng: np.random.Generator, val_fraction: float = 0.15,
                 test_fraction: float = 0.15) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices for train/val/test, split by whole trajectory."""
    ids = np.unique(groups)
    ids = ids[rng.permutation(len(ids))]
    n_val = max(1, int(round(val_fraction * len(ids))))
    n_test = int(round(test_fraction * len(ids))) if len(ids) - n_val > 1 else 0
    n_test = min(n_test, len(ids) - n_val - 1)
    val_ids, test_ids, train_ids = ids[:n_val], ids[n_val:n_val + n_test], ids[n_val + n_test:]
    pick = lambda sel: np.flatnonzero(np.isin(groups, sel))  # noqa: E731
    return pick(train_ids), pick(val_ids), pick(test_ids)


@dataclass
class TrainReport:
    model: nn.LstmModel
    train_loss: float
    val_loss: float
    test_loss: float | None
    zero_val_loss: float
    history: nn.TrainResult = field(repr=False)


def train_predictor(dataset: ResidualDataset, arch: Architecture, config: nn.TrainConfig,
                    rng: np.random.Generator, *, tick: float = DEFAULT_TICK, log_fn=None) -> TrainReport:
    """Fit the residual LSTM; returns the best-validation model and its losses.

    Losses are MSE in standardised target units; ``zero_val_loss`` is the
    validation loss of the constant-zero residual for comparison.
    """
    if len(dataset) < 100:
        raise InvalidArgument(f"dataset too small: {len(dataset)} samples (need >= 100)")
    if dataset.k != arch.k:
        raise InvalidArgument(f"dataset window {dataset.k} != architecture k {arch.k}")
    if len(np.unique(dataset.groups)) < 2:
        raise InvalidArgument("need at least two trajectories for a train/validation split")
    tr, va, te = split_groups(dataset.groups, rng, config.validation_fraction, config.validation_fraction)
    fm, fs, tm, ts = dataset.normalization(tr)
    hyper = {
        "hidden": arch.hidden,
        "layers": arch.layers,
        "k": arch.k,
        "horizon_steps": dataset.horizon_steps,
        "tick": tick,
        "train": nn.train_config_dict(config),
    }
    model = nn.init_model(N_INPUTS, arch.hidden, arch.layers, N_TARGETS, arch.k, rng, hyper)
    # zero head: training starts from the mean residual, so nothing is learned from nothing
    model.head_weights[...] = 0.0
    model.feature_mean, model.feature_scale = fm, fs
    model.target_mean, model.target_scale = tm, ts
    norm_targets = (dataset.targets - tm) / ts
    X, Y = dataset.windows, norm_targets
    result = nn.fit(model, X[tr], Y[tr], X[va], Y[va], config, rng, log=log_fn)
    best = result.model
    zero_val = float(np.mean((-tm / ts - Y[va]) ** 2))
    test_loss = nn.mse_loss(best, X[te], Y[te]) if len(te) else None
    return TrainReport(best, nn.mse_loss(best, X[tr], Y[tr]), result.best_val_loss, test_loss, zero_val, result)


@dataclass(frozen=True)
class CorpusConfig:
    """Training corpus layout: trajectory count and length, and the range of mean speeds."""

    trajectories: int = 80
    duration: float = 120.0
    speed_min: float = 0.2
    speed_max: float = 1.6
    stride: int = 20

    def __post_init__(self):
        if self.trajectories < 1 or self.duration <= 0 or self.stride < 1:
            raise InvalidArgument("corpus needs >= 1 trajectory, positive duration and stride >= 1")
        if not 0.0 <= self.speed_min <= self.speed_max:
            raise InvalidArgument("corpus speeds must satisfy 0 <= speed_min <= speed_max")


def corpus_speeds(cfg: CorpusConfig, seed: int) -> list[float]:
    """Mean speed of each corpus trajectory, one RNG stream per trajectory."""
    return [float(seeded_rng(seed, CORPUS_SPEED_STREAM + i).uniform(cfg.speed_min, cfg.speed_max))
            for i in range(cfg.trajectories)]


def generate_corpus(scenario: Scenario, gm: GmParams, beh: BehaviourParams, cfg: CorpusConfig,
                    seed: int) -> tuple[list[Trajectory], list[GmParams]]:
    """Ground-truth training trajectories and the GM parameters each was drawn with.

    Mixing mean speeds lets one model serve the whole speed range; the GM
    baseline of each trajectory uses that trajectory's mean speed.
    """
    params = [replace(gm, mean_v=v) for v in corpus_speeds(cfg, seed)]
    rngs = [seeded_rng(seed, i) for i in range(cfg.trajectories)]
    return generate_ground_truth_batch(scenario, params, beh, cfg.duration, rngs), params


def train_horizon_model(trajectories: Sequence[Trajectory], gm: GmParams | Sequence[GmParams],
                        horizon_steps: int, seed: int, *, arch: Architecture = Architecture(),
                        config: nn.TrainConfig = nn.TrainConfig(), stride: int = 20,
                        room: RoomGeometry = DEFAULT_ROOM, tick: float = DEFAULT_TICK,
                        log_fn=None) -> TrainReport:
    """Build the residual dataset for one horizon and train its model."""
    ds = build_residual_dataset(trajectories, gm, arch.k, horizon_steps, room=room, stride=stride)
    return train_predictor(ds, arch, config, seeded_rng(seed, TRAIN_STREAM + horizon_steps), tick=tick,
                           log_fn=log_fn)


def residual_output(model: nn.LstmModel, windows_states: np.ndarray, gm: GmParams,
                    room: RoomGeometry) -> np.ndarray:
    """De-normalised LSTM residuals for (N, k, 6) raw state windows."""
    out = nn.forward_batch(model, model_inputs(windows_states, gm.mean_v, room))
    return out * model.target_scale + model.target_mean


def hybrid_predict_array(model: nn.LstmModel, windows_states: np.ndarray, gm: GmParams, horizon_steps: int,
                         *, tick: float = DEFAULT_TICK, room: RoomGeometry = DEFAULT_ROOM) -> np.ndarray:
    w = np.asarray(windows_states, dtype=float)
    if w.ndim != 3 or w.shape[1] != model.k:
        raise InvalidArgument(f"history must hold exactly k={model.k} states, got shape {w.shape}")
    base = gm_predict_array(w[:, -1], gm, horizon_steps, tick, room)
    return apply_residual(base, residual_output(model, w, gm, room), room)


def hybrid_predict(model: nn.LstmModel, history: Sequence[MobilityState] | np.ndarray, gm: GmParams,
                   horizon_steps: int, *, tick: float = DEFAULT_TICK,
                   room: RoomGeometry = DEFAULT_ROOM) -> MobilityState:
    """GM baseline plus learned residual for the state ``horizon_steps`` ahead."""
    h = np.array([s.as_array() if isinstance(s, MobilityState) else s for s in history], dtype=float)
    if len(h) != model.k:
        raise InvalidArgument(f"history length {len(h)} != k={model.k}")
    return MobilityState.from_array(hybrid_predict_array(model, h[None], gm, horizon_steps, tick=tick, room=room)[0])


def predicted_channel(model: nn.LstmModel, history, gm: GmParams, horizon_steps: int,
                      scenario: Scenario) -> tuple[int, float, float]:
    """Associated AP id, predicted LOS gain and predicted rate from the hybrid state."""
    s_hat = hybrid_predict(model, history, gm, horizon_steps, tick=scenario.tick, room=scenario.room)
    g = gain_matrix(s_hat.as_array(), scenario)
    idx = associate_array(g, scenario)
    interf = interference_array(g, idx, scenario)
    gain = float(g[0, idx[0]])
    rate = float(rate_from(gain, interf[0], scenario.aps[idx[0]].transmit_power, scenario))
    return scenario.aps[idx[0]].id, gain, rate


# ---------------------------------------------------------------------------
# Dataset cache
# ---------------------------------------------------------------------------
# Layout (little-endian): 8s magic | u32 version | u32 N | u32 k | u32 horizon | u32 skipped
#   f64 windows (N*k*9) | f64 targets (N*6) | i64 groups (N)

DATASET_MAGIC = b"OWCRDS\x00\x00"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<8sIIIII")


def serialize_dataset(ds: ResidualDataset) -> bytes:
    return b"".join([
        _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds), ds.k, ds.horizon_steps, ds.skipped),
        np.ascontiguousarray(ds.windows, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.targets, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.groups, dtype="<i8").tobytes(),
    ])


def deserialize_dataset(data: bytes) -> ResidualDataset:
    if len(data) < _DS_HEADER.size:
        raise FormatError("truncated dataset header")
    magic, version, n, k, horizon, skipped = _DS_HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise FormatError("bad magic: not a residual dataset")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    sizes = (n * k * N_INPUTS * 8, n * N_TARGETS * 8, n * 8)
    if len(data) != _DS_HEADER.size + sum(sizes):
        raise FormatError("dataset payload has the wrong length")
    pos = _DS_HEADER.size
    w = np.frombuffer(data, "<f8", n * k * N_INPUTS, pos).reshape(n, k, N_INPUTS).astype(float)
    pos += sizes[0]
    t = np.frombuffer(data, "<f8", n * N_TARGETS, pos).reshape(n, N_TARGETS).astype(float)
    pos += sizes[1]
    g = np.frombuffer(data, "<i8", n, pos).astype(np.int64)
    return ResidualDataset(w, t, g, k, horizon, skipped)


def model_horizon_steps(model: nn.LstmModel) -> int | None:
    h = model.hyperparams.get("horizon_steps")
    return int(h) if h is not None else None


def zero_residual_model(arch: Architecture = Architecture(), horizon_steps: int | None = None,
                        tick: float = DEFAULT_TICK) -> nn.LstmModel:
    """A hybrid model whose residual is identically zero (reduces to the GM baseline)."""
    m = nn.zero_model(N_INPUTS, arch.hidden, arch.layers, N_TARGETS, arch.k)
    m.hyperparams = {"hidden": arch.hidden, "layers": arch.layers, "k": arch.k, "tick": tick,
                     "horizon_steps": horizon_steps}
    return m

