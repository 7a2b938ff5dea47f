"""Command-line entry point: ``gen-data``, ``train`` and ``eval``.

Each command reads an optional sectioned ``key = value`` config (the
reference scenario when omitted), writes its outputs plus a JSON manifest,
and exits with 0 on success, 2 on usage errors, 3 on config errors, 4 on
I/O errors and 5 when a required artifact is missing.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import math
import re
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__, nn
from .core import (
    AccessPoint,
    FormatError,
    InvalidArgument,
    InvalidGeometry,
    NoiseConfig,
    NotFound,
    ReceiverConfig,
    RoomGeometry,
    Scenario,
    read_trajectory_csv,
    write_trajectory_csv,
)
from .experiments import (
    DEFAULT_HORIZONS,
    DEFAULT_SPEEDS,
    ModelStore,
    model_file_name,
    run_horizon_sweep,
    run_rate_timeseries,
    run_speed_sweep,
    write_rate_csv,
    write_rmse_csv,
)
from .mobility import BehaviourParams, GmParams
from .predictor import Architecture, CorpusConfig, generate_corpus, train_horizon_model

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_MISSING = 0, 2, 3, 4, 5

REQUIRED_SECTIONS = ("room", "receiver", "noise", "sim")
DATA_MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Malformed, incomplete or unknown configuration."""


@dataclass(frozen=True)
class EvalSettings:
    realizations: int = 100
    duration: float = 10.0
    horizons: tuple[float, ...] = DEFAULT_HORIZONS
    speeds: tuple[float, ...] = DEFAULT_SPEEDS
    horizon: float = 0.1
    rate_speed: float = 1.0
    rate_duration: float = 60.0
    floor_db: float = -120.0
    linear: bool = False
    oracle: bool = False


@dataclass(frozen=True)
class Config:
    scenario: Scenario = field(default_factory=Scenario)
    gm: GmParams = field(default_factory=GmParams)
    behaviour: BehaviourParams = field(default_factory=BehaviourParams)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    arch: Architecture = field(default_factory=Architecture)
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seed: int = 42
    path: str | None = None
    sha256: str = hashlib.sha256(b"").hexdigest()


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_AP_SECTION = re.compile(r"^aps\[(\d+)\]$")
_OPTIONAL_SECTIONS = ("gm", "behaviour", "corpus", "train", "eval")


def _convert(section: str, key: str, raw: str, like: Any) -> Any:
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        if isinstance(like, tuple):
            return tuple(float(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
    return raw


def _build(cls, section: str, items: dict[str, str], renames: dict[str, tuple[str, Any]] | None = None,
           extra: Sequence[str] = ()):
    """Instantiate dataclass ``cls`` from config items; unknown keys are errors."""
    renames = renames or {}
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key in extra:
            continue
        if key in renames:
            target, fn = renames[key]
            kwargs[target] = fn(_convert(section, key, raw, 0.0))
        elif key in defaults:
            kwargs[key] = _convert(section, key, raw, defaults[key])
        else:
            raise ConfigError(f"[{section}] unknown key {key!r}")
    try:
        return cls(**kwargs)
    except (InvalidArgument, ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, path: str | None = None) -> Config:
    """Parse a sectioned config. Sections room, receiver, noise, sim and at least one aps[i] are required."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   default_section="__defaults__")
    cp.optionxform = str  # keys are case-sensitive (room L, W, H)
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = cp.sections()
    for name in REQUIRED_SECTIONS:
        if name not in sections:
            raise ConfigError(f"missing required section [{name}]")
    ap_sections = [s for s in sections if _AP_SECTION.match(s)]
    if not ap_sections:
        raise ConfigError("missing required section [aps[i]] (at least one access point)")
    for s in sections:
        if s not in REQUIRED_SECTIONS + _OPTIONAL_SECTIONS and not _AP_SECTION.match(s):
            raise ConfigError(f"unknown section [{s}]")
    items = {s: dict(cp.items(s)) for s in sections}

    room = _build(RoomGeometry, "room", items["room"])
    receiver = _build(ReceiverConfig, "receiver", items["receiver"],
                      {"fov_deg": ("fov_half_angle", math.radians)})
    noise = _build(NoiseConfig, "noise", items["noise"])
    sim = items["sim"]
    for key in sim:
        if key not in ("tick", "seed"):
            raise ConfigError(f"[sim] unknown key {key!r}")
    tick = _convert("sim", "tick", sim.get("tick", "0.01"), 0.0)
    seed = _convert("sim", "seed", sim.get("seed", "42"), 0)

    aps = []
    for s in sorted(ap_sections, key=lambda name: int(_AP_SECTION.match(name).group(1))):
        a = items[s]
        allowed = {"id", "x", "y", "z", "lambertian_order", "transmit_power"}
        for key in a:
            if key not in allowed:
                raise ConfigError(f"[{s}] unknown key {key!r}")
        for key in ("x", "y"):
            if key not in a:
                raise ConfigError(f"[{s}] missing key {key!r}")
        try:
            aps.append(AccessPoint(
                _convert(s, "id", a.get("id", _AP_SECTION.match(s).group(1)), 0),
                (_convert(s, "x", a["x"], 0.0), _convert(s, "y", a["y"], 0.0),
                 _convert(s, "z", a.get("z", repr(room.H)), 0.0)),
                _convert(s, "lambertian_order", a.get("lambertian_order", "20"), 0.0),
                _convert(s, "transmit_power", a.get("transmit_power", "0.01"), 0.0),
            ))
        except InvalidArgument as exc:
            raise ConfigError(f"[{s}] {exc}") from None
    try:
        scenario = Scenario(room, tuple(aps), receiver, noise, tick, seed)
    except (InvalidArgument, InvalidGeometry) as exc:
        raise ConfigError(str(exc)) from None

    gm = _build(GmParams, "gm", items.get("gm", {}), {"mean_theta_deg": ("mean_theta", math.radians)})
    behaviour = _build(BehaviourParams, "behaviour", items.get("behaviour", {}))
    corpus = _build(CorpusConfig, "corpus", items.get("corpus", {}))
    train_items = items.get("train", {})
    arch_keys = {f.name for f in dataclasses.fields(Architecture)}
    arch = _build(Architecture, "train", {k: v for k, v in train_items.items() if k in arch_keys})
    train = _build(nn.TrainConfig, "train", {k: v for k, v in train_items.items() if k not in arch_keys})
    ev = _build(EvalSettings, "eval", items.get("eval", {}))
    return Config(scenario, gm, behaviour, corpus, arch, train, ev, seed, path,
                  hashlib.sha256(text.encode()).hexdigest())


def load_config(path: str | None) -> Config:
    if path is None:
        return Config()
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8 text") from None
    cfg = parse_config(text, path)
    return dataclasses.replace(cfg, sha256=hashlib.sha256(data).hexdigest())


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, command: str, cfg: Config, seed: int, outputs: Sequence[Path],
                   started: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": {"path": cfg.path, "sha256": cfg.sha256},
        "seed": seed,
        "version": __version__,
        "outputs": [{"file": p.name, "sha256": _sha256_file(p)} for p in outputs],
        "wall_clock_s": round(time.monotonic() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(cfg: Config, out_dir: Path, seed: int) -> list[Path]:
    """Write the ground-truth training corpus as trajectory CSVs plus a manifest."""
    started = time.monotonic()
    trajectories, params = generate_corpus(cfg.scenario, cfg.gm, cfg.behaviour, cfg.corpus, seed)
    files = []
    for i, traj in enumerate(trajectories):
        path = out_dir / f"traj_{i:04d}.csv"
        write_trajectory_csv(traj, path)
        files.append(path)
    speeds = {p.name: gm.mean_v for p, gm in zip(files, params)}
    write_manifest(out_dir / DATA_MANIFEST, "gen-data", cfg, seed, files, started,
                   {"mean_v": speeds, "tick": cfg.scenario.tick})
    return files


def _load_corpus(cfg: Config, data_dir: Path):
    if not data_dir.is_dir():
        raise NotFound(f"data directory not found: {data_dir}")
    files = sorted(data_dir.glob("traj_*.csv"))
    if not files:
        raise NotFound(f"no trajectory files (traj_*.csv) in {data_dir}")
    speeds = {}
    manifest = data_dir / DATA_MANIFEST
    if manifest.is_file():
        try:
            speeds = json.loads(manifest.read_text()).get("mean_v", {})
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest}: {exc}") from None
    trajectories, params = [], []
    for path in files:
        traj = read_trajectory_csv(path)
        if not math.isclose(traj.tick, cfg.scenario.tick, rel_tol=1e-6) and len(traj) > 1:
            raise InvalidArgument(f"{path.name}: tick {traj.tick} differs from configured {cfg.scenario.tick}")
        trajectories.append(traj)
        params.append(dataclasses.replace(cfg.gm, mean_v=float(speeds.get(path.name, cfg.gm.mean_v))))
    return trajectories, params


def cmd_train(cfg: Config, data_dir: Path, horizon_ms: float, out_dir: Path, seed: int,
              log=print) -> Path:
    """Train the hybrid residual model for one horizon; returns the model path."""
    started = time.monotonic()
    horizon_steps = cfg.scenario.steps(horizon_ms / 1000.0)
    if horizon_steps < 1:
        raise InvalidArgument("horizon must be at least one tick")
    trajectories, params = _load_corpus(cfg, data_dir)
    report = train_horizon_model(trajectories, params, horizon_steps, seed, arch=cfg.arch, config=cfg.train,
                                 stride=cfg.corpus.stride, room=cfg.scenario.room, tick=cfg.scenario.tick,
                                 log_fn=lambda msg: print(msg, file=sys.stderr))
    path = out_dir / model_file_name(round(horizon_steps * cfg.scenario.tick * 1000))
    path.write_bytes(nn.serialize_model(report.model))
    log(f"train_loss {report.train_loss:.6g}  val_loss {report.val_loss:.6g}  "
        f"zero_residual_val_loss {report.zero_val_loss:.6g}")
    write_manifest(path.with_suffix(".manifest.json"), "train", cfg, seed, [path], started, {
        "data_dir": str(data_dir),
        "horizon_steps": horizon_steps,
        "train_loss": report.train_loss,
        "val_loss": report.val_loss,
        "test_loss": report.test_loss,
        "zero_residual_val_loss": report.zero_val_loss,
    })
    return path


def cmd_eval(cfg: Config, models_dir: Path, experiment: str, out_dir: Path, seed: int) -> Path:
    """Run one experiment and write its CSV; returns the CSV path."""
    started = time.monotonic()
    ev = cfg.eval
    sc = cfg.scenario
    store = ModelStore(models_dir, sc.tick)
    names = ("rwp", "gm", "hybrid") + (("oracle",) if ev.oracle else ())
    if experiment == "horizon":
        records = run_horizon_sweep(sc, cfg.gm, cfg.behaviour, ev.horizons, ev.realizations, seed, store,
                                    duration=ev.duration, floor_db=ev.floor_db, linear=ev.linear,
                                    names=names, k=cfg.arch.k)
        path = out_dir / "rmse_horizon.csv"
        write_rmse_csv(records, path, "horizon")
    elif experiment == "speed":
        records = run_speed_sweep(sc, cfg.gm, cfg.behaviour, ev.speeds, ev.realizations, seed, store,
                                  horizon=ev.horizon, duration=ev.duration, floor_db=ev.floor_db,
                                  linear=ev.linear, names=names, k=cfg.arch.k)
        path = out_dir / "rmse_speed.csv"
        write_rmse_csv(records, path, "speed")
    elif experiment == "rate":
        samples = run_rate_timeseries(sc, cfg.gm, cfg.behaviour, ev.rate_speed, ev.rate_duration, seed, store,
                                      horizon=ev.horizon, names=names)
        path = out_dir / "rate_time.csv"
        write_rate_csv(samples, path)
    else:  # argparse restricts the choices; kept for direct callers
        raise InvalidArgument(f"unknown experiment {experiment!r}")
    write_manifest(out_dir / f"manifest_{experiment}.json", f"eval {experiment}", cfg, seed, [path], started,
                   {"models_dir": str(models_dir)})
    return path


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=d,
                        help="sectioned key = value config (default: reference scenario)")
    parser.add_argument("--seed", metavar="U64", type=int, default=d,
                        help="master seed (default: [sim] seed, 42)")
    parser.add_argument("--out", metavar="DIR", default=d, help="output directory")
    parser.add_argument("--threads", metavar="N", type=int, default=d,
                        help="cap on BLAS worker threads (default: library default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owc-mobility",
        description="Generate training data, train hybrid mobility predictors and run the channel experiments.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen-data", help="write the ground-truth training corpus (default --out data)")
    _global_flags(p, suppress=True)

    p = sub.add_parser("train", help="train the hybrid model for one horizon (default --out models)")
    _global_flags(p, suppress=True)
    p.add_argument("--data", metavar="DIR", default="data", help="trajectory directory (default: data)")
    p.add_argument("--horizon-ms", metavar="MS", type=float, default=100.0,
                   help="prediction horizon in ms, a multiple of the tick (default: 100)")

    p = sub.add_parser("eval", help="run an experiment and write its CSV (default --out results)")
    _global_flags(p, suppress=True)
    p.add_argument("experiment", choices=("horizon", "speed", "rate"), help="which experiment to run")
    p.add_argument("--models", metavar="DIR", default="models", help="trained model directory (default: models)")
    p.add_argument("--realizations", metavar="N", type=int, default=None,
                   help="override [eval] realizations")
    p.add_argument("--oracle", action="store_true", help="also report the ground-truth oracle predictor")
    return parser


def _run(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if seed < 0 or seed >= 2 ** 64:
        raise InvalidArgument("seed must be an unsigned 64-bit integer")
    if args.command == "gen-data":
        files = cmd_gen_data(cfg, _out_dir(args, "data"), seed)
        print(f"wrote {len(files)} trajectories")
    elif args.command == "train":
        path = cmd_train(cfg, Path(args.data), args.horizon_ms, _out_dir(args, "models"), seed)
        print(f"wrote {path}")
    else:
        ev = cfg.eval
        if args.realizations is not None:
            ev = dataclasses.replace(ev, realizations=args.realizations)
        if args.oracle:
            ev = dataclasses.replace(ev, oracle=True)
        cfg = dataclasses.replace(cfg, eval=ev)
        path = cmd_eval(cfg, Path(args.models), args.experiment, _out_dir(args, "results"), seed)
        print(f"wrote {path}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name in ("config", "seed", "out", "threads"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if args.threads is not None and args.threads < 1:
        parser.print_usage(sys.stderr)
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(limits=args.threads)
        else:
            limit = nullcontext()
        with limit:
            return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotFound as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InvalidArgument, InvalidGeometry) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
