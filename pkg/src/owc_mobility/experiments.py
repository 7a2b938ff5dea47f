"""Channel-prediction metrics and the three evaluation experiments.

* RMSE of the predicted LOS gain (in dB) versus prediction horizon,
* the same versus mean user speed at a fixed horizon,
* realized data rate versus time when association follows the prediction.

Every experiment is a pure function of its arguments and seed. Evaluation
trajectories draw from their own RNG streams, disjoint from the training
corpus streams.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .channel import associate_array, gain_matrix, realized_rate_array
from .core import InvalidArgument, NotFound, Scenario, seeded_rng
from .mobility import BehaviourParams, GmParams, generate_ground_truth_batch, gm_predict_array, rwp_predict_array
from .predictor import history_windows, hybrid_predict_array, model_horizon_steps

MODELS = ("rwp", "gm", "hybrid")
EVAL_STREAM = 1_000_000
RATE_STREAM = 3_000_000
DEFAULT_HORIZONS = (0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_SPEEDS = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)
DEFAULT_K = 10


@dataclass(frozen=True)
class RmseRecord:
    model_name: str
    sweep_value: float
    rmse_db: float
    n_samples: int
    seed_count: int


@dataclass(frozen=True)
class RateSample:
    t: float
    model_name: str
    rate: float
    ap_id: int


def model_file_name(horizon_ms: int) -> str:
    return f"hybrid_h{int(horizon_ms)}ms.lstm"


class ModelStore:
    """Hybrid models keyed by horizon in ticks, loaded lazily from a directory."""

    def __init__(self, directory: str | Path, tick: float):
        self.directory = Path(directory)
        self.tick = tick
        self._cache: dict[int, nn.LstmModel] = {}

    def path_for(self, horizon_steps: int) -> Path:
        return self.directory / model_file_name(round(horizon_steps * self.tick * 1000))

    def __getitem__(self, horizon_steps: int) -> nn.LstmModel:
        if horizon_steps not in self._cache:
            path = self.path_for(horizon_steps)
            if not path.is_file():
                raise NotFound(f"no trained model for this horizon: missing {path}")
            self._cache[horizon_steps] = nn.deserialize_model(path.read_bytes())
        return self._cache[horizon_steps]


def _model_for(models, horizon_steps: int, tick: float) -> nn.LstmModel:
    if isinstance(models, ModelStore):
        return models[horizon_steps]
    try:
        model = models[horizon_steps]
    except KeyError:
        raise NotFound(f"no trained model for this horizon: missing "
                       f"{model_file_name(round(horizon_steps * tick * 1000))}") from None
    trained_for = model_horizon_steps(model)
    if trained_for is not None and trained_for != horizon_steps:
        raise InvalidArgument(f"model trained for {trained_for} steps used at horizon {horizon_steps}")
    return model


def channel_rmse(true_gains, predicted_gains, floor_db: float = -120.0, linear: bool = False) -> float:
    """RMSE between predicted and true LOS gains, in dB (gains floored at ``floor_db``).

    With ``linear=True`` the RMSE is taken on the raw gains instead.
    """
    h = np.asarray(true_gains, dtype=float)
    h_hat = np.asarray(predicted_gains, dtype=float)
    if h.shape != h_hat.shape:
        raise InvalidArgument("true and predicted gain sequences differ in length")
    if h.size == 0:
        raise InvalidArgument("empty gain sequences")
    if linear:
        return float(np.sqrt(np.mean((h_hat - h) ** 2)))
    floor = 10.0 ** (floor_db / 10.0)
    err = 10.0 * np.log10(np.maximum(h_hat, floor)) - 10.0 * np.log10(np.maximum(h, floor))
    return float(np.sqrt(np.mean(err ** 2)))


def predict(name: str, states: np.ndarray, indices: np.ndarray, horizon_steps: int, gm: GmParams,
            scenario: Scenario, model: nn.LstmModel | None = None) -> np.ndarray:
    """Predicted states ``horizon_steps`` ahead of ``states[indices]`` for one predictor."""
    tick, room = scenario.tick, scenario.room
    if name == "rwp":
        return rwp_predict_array(states[indices], horizon_steps, tick, room)
    if name == "gm":
        return gm_predict_array(states[indices], gm, horizon_steps, tick, room)
    if name == "hybrid":
        if model is None:
            raise InvalidArgument("hybrid prediction needs a model")
        return hybrid_predict_array(model, history_windows(states, model.k, indices), gm, horizon_steps,
                                    tick=tick, room=room)
    if name == "oracle":
        return states[np.minimum(indices + horizon_steps, len(states) - 1)]
    raise InvalidArgument(f"unknown predictor {name!r}")


def _gain_pairs(pred: np.ndarray, true: np.ndarray, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Gains of the AP associated from the predicted state, at predicted and at true state."""
    gp = gain_matrix(pred, scenario)
    gt = gain_matrix(true, scenario)
    ap = associate_array(gp, scenario)
    rows = np.arange(len(ap))
    return gt[rows, ap], gp[rows, ap]


def _rmse_records(trajs, gm: GmParams, scenario: Scenario, horizon_steps: int, model, k: int,
                  sweep_value: float, names: Sequence[str], floor_db: float, linear: bool) -> list[RmseRecord]:
    # every predictor is scored on the same indices: those with a full k-state history
    records = []
    for name in names:
        h_true, h_pred = [], []
        for tr in trajs:
            s = tr.states
            idx = np.arange(k - 1, len(s) - horizon_steps)
            if len(idx) == 0:
                continue
            p = predict(name, s, idx, horizon_steps, gm, scenario, model)
            t, ph = _gain_pairs(p, s[idx + horizon_steps], scenario)
            h_true.append(t)
            h_pred.append(ph)
        if not h_true:
            raise InvalidArgument("evaluation trajectories too short for this horizon")
        h_true = np.concatenate(h_true)
        h_pred = np.concatenate(h_pred)
        records.append(RmseRecord(name, sweep_value, channel_rmse(h_true, h_pred, floor_db, linear),
                                  len(h_true), len(trajs)))
    return records


def _sorted(records: list[RmseRecord]) -> list[RmseRecord]:
    rank = {name: i for i, name in enumerate(MODELS + ("oracle",))}
    return sorted(records, key=lambda r: (rank.get(r.model_name, len(rank)), r.sweep_value))


def _eval_trajectories(scenario: Scenario, gm: GmParams, beh: BehaviourParams, duration: float,
                       realizations: int, seed: int):
    if realizations < 1:
        raise InvalidArgument("need at least one realization")
    rngs = [seeded_rng(seed, EVAL_STREAM + r) for r in range(realizations)]
    return generate_ground_truth_batch(scenario, gm, beh, duration, rngs)


def run_horizon_sweep(scenario: Scenario, gm: GmParams, beh: BehaviourParams,
                      horizons: Sequence[float] = DEFAULT_HORIZONS, realizations: int = 100, seed: int = 42,
                      models: Mapping[int, nn.LstmModel] | ModelStore | None = None, *,
                      duration: float = 10.0, floor_db: float = -120.0, linear: bool = False,
                      names: Sequence[str] = MODELS, k: int = DEFAULT_K) -> list[RmseRecord]:
    """Channel RMSE per predictor and horizon (seconds) on held-out realizations.

    ``models`` maps horizon in ticks to a trained hybrid model; it is only
    needed when ``names`` includes ``"hybrid"``.
    """
    steps = [scenario.steps(h) for h in horizons]
    if any(n < 1 for n in steps):
        raise InvalidArgument("horizons must be at least one tick")
    # resolve models before simulating so a missing file fails fast
    resolved = {n: _model_for(models or {}, n, scenario.tick) for n in steps} if "hybrid" in names else {}
    if resolved:
        k = max(m.k for m in resolved.values())
    trajs = _eval_trajectories(scenario, gm, beh, duration, realizations, seed)
    records = []
    for h, n in zip(horizons, steps):
        records += _rmse_records(trajs, gm, scenario, n, resolved.get(n), k, h, names, floor_db, linear)
    return _sorted(records)


def run_speed_sweep(scenario: Scenario, gm: GmParams, beh: BehaviourParams,
                    speeds: Sequence[float] = DEFAULT_SPEEDS, realizations: int = 100, seed: int = 42,
                    models: Mapping[int, nn.LstmModel] | ModelStore | None = None, *, horizon: float = 0.1,
                    duration: float = 10.0, floor_db: float = -120.0, linear: bool = False,
                    names: Sequence[str] = MODELS, k: int = DEFAULT_K) -> list[RmseRecord]:
    """Channel RMSE per predictor at a fixed horizon, with the GM mean speed set per sweep point.

    The same realization seeds are reused at every speed.
    """
    if any(v < 0 for v in speeds):
        raise InvalidArgument("speeds must be non-negative")
    n = scenario.steps(horizon)
    model = _model_for(models or {}, n, scenario.tick) if "hybrid" in names else None
    if model is not None:
        k = model.k
    records = []
    for v in speeds:
        gm_v = replace(gm, mean_v=float(v))
        trajs = _eval_trajectories(scenario, gm_v, beh, duration, realizations, seed)
        records += _rmse_records(trajs, gm_v, scenario, n, model, k, float(v), names, floor_db, linear)
    return _sorted(records)


def run_rate_timeseries(scenario: Scenario, gm: GmParams, beh: BehaviourParams, speed: float = 1.0,
                        duration: float = 60.0, seed: int = 42,
                        models: Mapping[int, nn.LstmModel] | ModelStore | None = None, *, horizon: float = 0.1,
                        names: Sequence[str] = MODELS) -> list[RateSample]:
    """Realized rate per tick when each predictor drives AP association.

    At tick ``j`` the association comes from the prediction made at
    ``j - horizon`` (from the initial state during the first horizon); the
    rate is then computed from the true state at ``j``.
    """
    if duration < 1.0:
        raise InvalidArgument("duration must be at least 1 s")
    n = scenario.steps(horizon)
    gm_r = replace(gm, mean_v=float(speed), sigma_v=0.0)
    traj = generate_ground_truth_batch(scenario, gm_r, beh, duration, [seeded_rng(seed, RATE_STREAM)])[0]
    s = traj.states
    j = np.arange(len(s))
    src = np.maximum(j - n, 0)
    model = _model_for(models or {}, n, scenario.tick) if "hybrid" in names else None
    samples = []
    for name in names:
        if name == "oracle":
            pred = s
        else:
            pred = predict(name, s, src, n, gm_r, scenario, model)
        ap = associate_array(gain_matrix(pred, scenario), scenario)
        rates = realized_rate_array(s, ap, scenario)
        ids = [scenario.aps[a].id for a in ap]
        samples += [RateSample(float(t), name, float(r), int(i)) for t, r, i in zip(traj.times, rates, ids)]
    return samples


def rate_series(samples: Sequence[RateSample], name: str) -> np.ndarray:
    return np.array([s.rate for s in samples if s.model_name == name])


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def write_rmse_csv(records: Sequence[RmseRecord], path: str | Path, sweep: str = "horizon") -> None:
    column = {"horizon": "horizon_s", "speed": "speed_mps"}[sweep]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", column, "rmse_db", "n", "seeds"])
        for r in records:
            w.writerow([r.model_name, f"{r.sweep_value:.9g}", f"{r.rmse_db:.9g}", r.n_samples, r.seed_count])


def write_rate_csv(samples: Sequence[RateSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "t_s", "rate_bps", "ap_id"])
        for s in samples:
            w.writerow([s.model_name, f"{s.t:.9g}", f"{s.rate:.9g}", s.ap_id])


def capacity_bound(scenario: Scenario) -> float:
    """Single-user, interference-free rate under the best AP at its nadir with an upward receiver."""
    best = 0.0
    for ap in scenario.aps:
        d = ap.position[2] - scenario.receiver.height
        h = (ap.lambertian_order + 1.0) * scenario.receiver.area / (2.0 * math.pi * d * d)
        snr = (ap.transmit_power * scenario.receiver.responsivity * h) ** 2 / scenario.noise.noise_variance
        best = max(best, scenario.noise.bandwidth * math.log2(1.0 + snr))
    return best
