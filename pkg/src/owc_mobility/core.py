"""Domain types, scenario configuration, angle arithmetic and seeded RNG.

Everything here is an immutable value type. Arrays of states (used by the
vectorised mobility kernels and the evaluation harness) are plain numpy
arrays with columns in :data:`STATE_FIELDS` order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

STATE_FIELDS = ("x", "y", "v", "psi", "theta", "phi")
TRAJECTORY_HEADER = ("t",) + STATE_FIELDS


class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's precondition."""


class InvalidGeometry(ValueError):
    """Raised for degenerate transmitter/receiver geometry (e.g. zero distance)."""


class NotFound(LookupError):
    """Raised when a referenced AP id or artifact file does not exist."""


class FormatError(ValueError):
    """Raised when a serialized artifact is malformed."""


# ---------------------------------------------------------------------------
# Angles
# ---------------------------------------------------------------------------

def wrap_angle(a):
    """Map ``a`` into (-pi, pi]. Works on floats and numpy arrays.

    Values already inside the range are returned untouched (bit-exact).
    """
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"wrap_angle: non-finite input {a!r}")
    out = np.where((arr > math.pi) | (arr <= -math.pi), math.pi - np.mod(math.pi - arr, TWO_PI), arr)
    out = np.where(out <= -math.pi, out + TWO_PI, out)
    if np.ndim(a) == 0:
        return float(out)
    return out


def angle_diff(a, b):
    """Wrap-aware difference ``a - b`` in (-pi, pi]."""
    arr_a = np.asarray(a, dtype=float)
    arr_b = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(arr_a)) and np.all(np.isfinite(arr_b))):
        raise InvalidArgument("angle_diff: non-finite input")
    return wrap_angle(arr_a - arr_b) if (np.ndim(a) or np.ndim(b)) else wrap_angle(float(a) - float(b))


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def seeded_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Deterministic generator for the ``(seed, stream_id)`` pair.

    Streams are spawned through :class:`numpy.random.SeedSequence`, so distinct
    stream ids give statistically independent sequences.
    """
    if seed < 0 or stream_id < 0:
        raise InvalidArgument("seed and stream_id must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoomGeometry:
    L: float = 5.0
    W: float = 5.0
    H: float = 3.0

    def __post_init__(self):
        if not (self.L > 0 and self.W > 0 and self.H > 0):
            raise InvalidArgument(f"room dimensions must be positive, got {self}")


@dataclass(frozen=True)
class MobilityState:
    """User state: planar position, speed, heading and receiver orientation.

    ``theta`` is the tilt of the receiver normal from vertical and ``phi`` its
    azimuth. Construction does not validate against a room; use
    :meth:`check` for that.
    """

    x: float
    y: float
    v: float
    psi: float
    theta: float
    phi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.psi, self.theta, self.phi], dtype=float)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "MobilityState":
        return cls(*(float(z) for z in a[:6]))

    def check(self, room: RoomGeometry, tol: float = 0.0) -> None:
        errors = []
        if not (-tol <= self.x <= room.L + tol and -tol <= self.y <= room.W + tol):
            errors.append("position outside room")
        if self.v < 0:
            errors.append("negative speed")
        for name in ("psi", "phi"):
            val = getattr(self, name)
            if not (-math.pi < val <= math.pi):
                errors.append(f"{name} outside (-pi, pi]")
        if not (0.0 <= self.theta <= HALF_PI):
            errors.append("theta outside [0, pi/2]")
        if errors:
            raise InvalidArgument(f"invalid state {self}: " + ", ".join(errors))


@dataclass(frozen=True)
class AccessPoint:
    id: int
    position: tuple[float, float, float]
    lambertian_order: float = 20.0
    transmit_power: float = 0.01

    def __post_init__(self):
        if self.lambertian_order < 1:
            raise InvalidArgument("lambertian_order must be >= 1")
        if self.transmit_power <= 0:
            raise InvalidArgument("transmit_power must be positive")
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))


@dataclass(frozen=True)
class ReceiverConfig:
    area: float = 1e-4
    responsivity: float = 0.5
    fov_half_angle: float = math.radians(60.0)
    height: float = 1.0

    def __post_init__(self):
        if self.area <= 0 or self.responsivity <= 0:
            raise InvalidArgument("receiver area and responsivity must be positive")
        if not (0 < self.fov_half_angle <= HALF_PI):
            raise InvalidArgument("fov_half_angle must lie in (0, pi/2]")
        if self.height <= 0:
            raise InvalidArgument("receiver height must be positive")


@dataclass(frozen=True)
class NoiseConfig:
    bandwidth: float = 400e6
    noise_variance: float = 1e-14

    def __post_init__(self):
        if self.bandwidth <= 0 or self.noise_variance <= 0:
            raise InvalidArgument("bandwidth and noise_variance must be positive")


def grid_access_points(room: RoomGeometry, nx: int = 2, ny: int = 2, lambertian_order: float = 20.0,
                       transmit_power: float = 0.01) -> tuple[AccessPoint, ...]:
    """Ceiling APs on a regular ``nx`` x ``ny`` grid, ids starting at 1."""
    aps = []
    ap_id = 1
    for j in range(ny):
        for i in range(nx):
            pos = ((i + 0.5) * room.L / nx, (j + 0.5) * room.W / ny, room.H)
            aps.append(AccessPoint(ap_id, pos, lambertian_order, transmit_power))
            ap_id += 1
    return tuple(aps)


@dataclass(frozen=True)
class Scenario:
    room: RoomGeometry = field(default_factory=RoomGeometry)
    aps: tuple[AccessPoint, ...] = ()
    receiver: ReceiverConfig = field(default_factory=ReceiverConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    tick: float = 0.01
    seed: int = 42

    def __post_init__(self):
        aps = tuple(self.aps) if self.aps else grid_access_points(self.room)
        object.__setattr__(self, "aps", aps)
        if self.tick <= 0:
            raise InvalidArgument("tick must be positive")
        ids = [ap.id for ap in aps]
        if len(set(ids)) != len(ids):
            raise InvalidArgument(f"duplicate AP ids: {ids}")
        if not (0 < self.receiver.height < self.room.H):
            raise InvalidArgument("receiver height must lie strictly between floor and ceiling")
        for ap in aps:
            x, y, z = ap.position
            if not (0 <= x <= self.room.L and 0 <= y <= self.room.W) or z != self.room.H:
                raise InvalidArgument(f"AP {ap.id} must sit on the ceiling inside the room")

    def ap_by_id(self, ap_id: int) -> AccessPoint:
        for ap in self.aps:
            if ap.id == ap_id:
                return ap
        raise NotFound(f"no AP with id {ap_id}")

    def steps(self, seconds: float) -> int:
        """Convert a duration to a whole number of ticks; raise if not a multiple."""
        n = round(seconds / self.tick)
        if n < 0 or not math.isclose(n * self.tick, seconds, rel_tol=1e-9, abs_tol=1e-12):
            raise InvalidArgument(f"{seconds} s is not a multiple of tick {self.tick} s")
        return int(n)

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)


@dataclass(frozen=True)
class Trajectory:
    """States sampled every ``tick`` seconds; ``states`` is an (n, 6) array."""

    tick: float
    states: np.ndarray

    def __post_init__(self):
        arr = np.array(self.states, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 6 or len(arr) == 0:
            raise InvalidArgument("trajectory states must be a non-empty (n, 6) array")
        arr.setflags(write=False)
        object.__setattr__(self, "states", arr)

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i: int) -> MobilityState:
        return MobilityState.from_array(self.states[i])

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.tick

    def check(self, room: RoomGeometry, tol: float = 1e-9) -> None:
        s = self.states
        ok = (
            np.all((s[:, 0] >= -tol) & (s[:, 0] <= room.L + tol))
            and np.all((s[:, 1] >= -tol) & (s[:, 1] <= room.W + tol))
            and np.all(s[:, 2] >= 0)
            and np.all((s[:, 3] > -math.pi) & (s[:, 3] <= math.pi))
            and np.all((s[:, 5] > -math.pi) & (s[:, 5] <= math.pi))
            and np.all((s[:, 4] >= 0) & (s[:, 4] <= HALF_PI))
        )
        if not ok:
            raise InvalidArgument("trajectory violates state invariants")


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    """Write ``t,x,y,v,psi,theta,phi`` rows at 9 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for t, row in zip(traj.times, traj.states.tolist()):
            w.writerow([f"{t:.9g}"] + [f"{v:.9g}" for v in row])


def read_trajectory_csv(path: str | Path) -> Trajectory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRAJECTORY_HEADER:
            raise FormatError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        try:
            rows = [[float(c) for c in r] for r in reader if r]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if any(len(r) != len(TRAJECTORY_HEADER) for r in rows):
            raise FormatError(f"{path}: every row needs {len(TRAJECTORY_HEADER)} columns")
    if not rows:
        raise FormatError(f"{path}: no states")
    arr = np.asarray(rows)
    tick = float(arr[1, 0] - arr[0, 0]) if len(arr) > 1 else 0.01
    states = arr[:, 1:]
    # 9-digit rounding can push a clipped tilt just past pi/2
    states[:, 4] = np.clip(states[:, 4], 0.0, HALF_PI)
    states[:, 3] = wrap_angle(states[:, 3])
    states[:, 5] = wrap_angle(states[:, 5])
    return Trajectory(round(tick, 9), states)


def states_to_array(states: Iterable[MobilityState]) -> np.ndarray:
    return np.array([s.as_array() for s in states], dtype=float)
