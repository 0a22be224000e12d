"""Configuration, training and evaluation runs, sweeps and the command-line interface.

Training writes a directory holding network checkpoints, the learning curve
and a ``manifest.json`` that records the configuration hash, the seed and the
checkpoint paths.  Evaluation and sweeps load such a directory and refuse to
run when the configuration does not match the one used for training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import bspower as bp
from . import dccn as dc
from . import drl
from . import env as E
from . import netmodel as nm
from . import traffic as tr
from .bspower import SmState
from .neural import load_checkpoint, save_checkpoint

OUTPUT_ROOT_ENV = "SLEEPZOOM_OUTPUT_ROOT"
MANIFEST_NAME = "manifest.json"
EVAL_SEED_BASE = 1_000_000  # evaluation episodes never reuse training episode seeds
SWEEP_PARAMS = ("packet_size", "mean_interarrival", "user_count")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


class MissingCheckpoint(RuntimeError):
    pass


class ManifestMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------- config blocks
@dataclass(frozen=True)
class GeometryConfig:
    bs_positions: tuple = nm.DEFAULT_BS_POSITIONS
    user_positions: tuple = nm.DEFAULT_USER_POSITIONS
    ris_position: tuple = nm.DEFAULT_RIS_POSITION
    ris_elements: int = 128

    def build(self) -> nm.NetworkGeometry:
        return nm.NetworkGeometry.from_coords(self.bs_positions, self.user_positions, self.ris_position,
                                              self.ris_elements)


@dataclass(frozen=True)
class TrafficBlock:
    packet_size: float = 0.05  # MB
    mean_interarrival: float = 20.0  # ms
    active_users: Optional[int] = None

    def __post_init__(self):
        if not self.packet_size > 0:
            raise ValueError("packet_size must be > 0")
        if not self.mean_interarrival > 0:
            raise ValueError("mean_interarrival must be > 0")


@dataclass(frozen=True)
class SimulationBlock:
    radii: tuple = (40.0, 50.0, 60.0)
    slot_ms: float = 1.0
    episode_slots: int = 200
    ris_element_power: float = 1.5e-3
    max_sleep_depth: SmState = SmState.DEEP


@dataclass(frozen=True)
class DccnConfig:
    n_capacity: int = 6000
    n_phase: int = 2000
    cap_epochs: int = 20
    phase_epochs: int = 20
    learning_rate: float = 1e-3
    p_link: float = 0.3
    ramp_fraction: float = 0.3

    def __post_init__(self):
        if self.n_capacity < 1 or self.n_phase < 1:
            raise ValueError("training set sizes must be >= 1")
        if not 0 <= self.ramp_fraction <= 1 or not 0 < self.p_link <= 1:
            raise ValueError("fractions must lie in [0, 1]")


@dataclass
class LearnerConfig:
    ppo: drl.PpoConfig = field(default_factory=lambda: drl.PpoConfig(iterations=150, learning_rate=1e-3,
                                                                     energy_shaping=0.1))
    dqn: drl.DqnConfig = field(default_factory=lambda: drl.DqnConfig(iterations=150, energy_shaping=0.1))
    dccn: DccnConfig = field(default_factory=DccnConfig)


@dataclass
class ExperimentConfig:
    scheme: E.Scheme = E.Scheme.PSZR
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    link: nm.LinkParams = field(default_factory=nm.LinkParams)
    power: bp.PowerTimingTable = field(default_factory=bp.PowerTimingTable)
    traffic: TrafficBlock = field(default_factory=TrafficBlock)
    reward: E.RewardParams = field(default_factory=E.RewardParams)
    simulation: SimulationBlock = field(default_factory=SimulationBlock)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    seeds: tuple = (1, 2, 3)
    duration: int = 2000
    output_dir: str = "runs"

    def __post_init__(self):
        self.scheme = E.Scheme(self.scheme)
        self.seeds = tuple(self.seeds)
        if not self.seeds:
            raise ConfigError("seeds: must be nonempty")
        if self.duration < 0:
            raise ConfigError("duration: must be >= 0")
        if self.traffic.active_users is not None and not 0 <= self.traffic.active_users <= len(
                self.geometry.user_positions):
            raise ConfigError("traffic.active_users: must lie in [0, number of users]")

    def env_config(self) -> E.EnvConfig:
        sim = self.simulation
        return E.EnvConfig(
            geometry=self.geometry.build(), link=self.link, table=self.power,
            traffic=tr.TrafficConfig.from_mb(self.traffic.mean_interarrival, self.traffic.packet_size),
            reward=self.reward, scheme=self.scheme, radii=tuple(sim.radii), slot_ms=sim.slot_ms,
            episode_slots=sim.episode_slots, ris_element_power=sim.ris_element_power,
            max_sleep_depth=sim.max_sleep_depth, active_users=self.traffic.active_users,
        )

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- JSON <-> dataclasses
def _hints(cls) -> dict:
    return typing.get_type_hints(cls, vars(sys.modules[cls.__module__]))


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, Enum):
        return value.name if isinstance(value, SmState) else value.value
    if isinstance(value, (tuple, list)):
        return [_to_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def serialize(config: ExperimentConfig) -> str:
    return json.dumps(_to_plain(config), indent=2, sort_keys=True)


def _convert(value, hint, default, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0], default, path)
    if isinstance(hint, type) and dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(hint, value, path)
    if isinstance(hint, type) and issubclass(hint, Enum):
        choices = [m.name for m in hint] if hint is SmState else [m.value for m in hint]
        try:
            return hint[value] if hint is SmState else hint(value)
        except (KeyError, ValueError):
            raise ConfigError(f"{path}: {value!r} is not one of {choices}") from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(f"{path}: expected an integer")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return _tuple_like(value, default, path)
    return value


def _tuple_like(value, default, path):
    out = []
    for i, v in enumerate(value):
        ref = default[i] if isinstance(default, tuple) and i < len(default) else (
            default[0] if isinstance(default, tuple) and default else None)
        if isinstance(v, (list, tuple)):
            out.append(_tuple_like(v, ref, f"{path}[{i}]"))
        elif isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}[{i}]: expected a number")
        else:
            out.append(int(v) if isinstance(ref, int) and float(v) == int(v) else float(v))
    return tuple(out)


def _build(cls, data: dict, path: str = ""):
    hints = _hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{_join(path, unknown[0])}: unknown field (expected one of {sorted(names)})")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _convert(value, hints[name], getattr(defaults, name), _join(path, name))
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        where = path or cls.__name__
        bad = [k for k in kwargs if k in str(exc)]
        if len(bad) == 1:
            where = _join(path, bad[0])
        elif len(kwargs) == 1 and not bad:
            where = _join(path, next(iter(kwargs)))
        raise ConfigError(f"{where}: {exc}") from None


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def parse_config(document: str) -> ExperimentConfig:
    try:
        data = json.loads(document) if document.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<document>: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("<document>: top level must be an object")
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"<file>: {p} does not exist")
    return parse_config(p.read_text())


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(serialize(config).encode()).hexdigest()[:16]


def training_hash(config: ExperimentConfig) -> str:
    """Hash of everything that shapes a trained model (seeds, duration and output location excluded)."""
    plain = _to_plain(config)
    for k in ("seeds", "duration", "output_dir"):
        plain.pop(k)
    return hashlib.sha256(json.dumps(plain, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- trained models
@dataclass
class TrainedModel:
    scheme: E.Scheme
    agent: object  # drl.PolicyHeads, drl.DqnAgent or None
    dccn: Optional[dc.DccnBundle]
    curve: Optional[drl.LearningCurve]
    training_hash: str
    seed: int
    train_seconds: float = 0.0  # wall time of train(), DCCN included when it was built here

    def ris_policy(self):
        return None if self.dccn is None else self.dccn.policy()


_DCCN_CACHE: dict = {}


def train_dccn_for(config: ExperimentConfig, seed: int) -> dc.DccnBundle:
    """Phase optimizer for the config's geometry and link; memoized per process."""
    key = (_to_json_key(config.geometry), _to_json_key(config.link), _to_json_key(config.learner.dccn), seed)
    if key not in _DCCN_CACHE:
        d = config.learner.dccn
        _DCCN_CACHE[key] = dc.train_dccn(
            config.geometry.build(), config.link, np.random.default_rng(seed), n_capacity=d.n_capacity,
            n_phase=d.n_phase, cap_epochs=d.cap_epochs, phase_epochs=d.phase_epochs, lr=d.learning_rate,
            p_link=d.p_link, ramp_fraction=d.ramp_fraction)
    return _DCCN_CACHE[key]


def _to_json_key(block) -> str:
    return json.dumps(_to_plain(block), sort_keys=True)


def train(config: ExperimentConfig, seed: int, callback: Optional[Callable] = None,
          dccn: Optional[dc.DccnBundle] = None) -> TrainedModel:
    start = time.perf_counter()
    spec = config.scheme.spec
    if spec.ris and dccn is None:
        dccn = train_dccn_for(config, seed)
    env_cfg = config.env_config()
    ris = None if dccn is None else dccn.policy()

    def make_env():
        return E.SleepZoomEnv(env_cfg, ris_policy=ris, seed=seed)

    curve = None
    agent = None
    if spec.learner == "ppo":
        res = drl.train_ppo(make_env, config.learner.ppo, seed, callback)
        agent, curve = res.policy, res.curve
    elif spec.learner == "dqn":
        res = drl.train_dqn(make_env, config.learner.dqn, seed, callback)
        agent, curve = drl.DqnAgent(res.q_net, res.catalog), res.curve
    return TrainedModel(config.scheme, agent, dccn, curve, training_hash(config), seed,
                        time.perf_counter() - start)


def save_model(model: TrainedModel, config: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpts = {}
    if isinstance(model.agent, drl.PolicyHeads):
        save_checkpoint(model.agent.net, out / "policy.ckpt")
        ckpts["policy"] = "policy.ckpt"
    elif isinstance(model.agent, drl.DqnAgent):
        save_checkpoint(model.agent.q_net, out / "q.ckpt")
        ckpts["q"] = "q.ckpt"
    if model.dccn is not None:
        save_checkpoint(model.dccn.capacity.net, out / "dccn_capacity.ckpt")
        save_checkpoint(model.dccn.phase.net, out / "dccn_phase.ckpt")
        ckpts["dccn_capacity"] = "dccn_capacity.ckpt"
        ckpts["dccn_phase"] = "dccn_phase.ckpt"
    if model.curve is not None:
        write_learning_curve(out / "learning_curve.csv", model.curve, config_hash(config))
    (out / "config.json").write_text(serialize(config))
    manifest = {
        "scheme": model.scheme.value,
        "config_hash": config_hash(config),
        "training_hash": model.training_hash,
        "seeds": [model.seed],
        "train_seconds": model.train_seconds,
        "checkpoints": ckpts,
        "dccn": None if model.dccn is None else {
            "capacity_mean": model.dccn.capacity.mean, "capacity_scale": model.dccn.capacity.scale,
            "phase_out_scale": model.dccn.phase.out_scale, "bits": model.dccn.bits,
            "holdout_rel_rmse": model.dccn.holdout_rel_rmse,
        },
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_model(checkpoint, config: ExperimentConfig) -> TrainedModel:
    """Load a training directory (or its manifest) and check it against ``config``."""
    path = Path(checkpoint)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise MissingCheckpoint(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    base = path.parent
    if manifest["scheme"] != config.scheme.value:
        raise ManifestMismatch(f"manifest is for scheme {manifest['scheme']}, config asks for {config.scheme.value}")
    if manifest["training_hash"] != training_hash(config):
        raise ManifestMismatch("configuration differs from the one used for training "
                               f"({training_hash(config)} != {manifest['training_hash']})")
    ck = manifest["checkpoints"]
    missing = [name for name in ck.values() if not (base / name).is_file()]
    if missing:
        raise MissingCheckpoint(f"checkpoint files missing: {missing}")
    env = E.SleepZoomEnv(config.env_config())
    agent = None
    if "policy" in ck:
        agent = drl.PolicyHeads(env.obs_size, env.M, env.N, None, net=load_checkpoint(base / ck["policy"]))
    elif "q" in ck:
        agent = drl.DqnAgent(load_checkpoint(base / ck["q"]), drl.ActionCatalog(env.M))
    bundle = None
    if "dccn_phase" in ck:
        meta = manifest["dccn"]
        geometry = config.geometry.build()
        cap = dc.CapacityNet(load_checkpoint(base / ck["dccn_capacity"]), config.link, meta["capacity_mean"],
                             meta["capacity_scale"])
        phase = dc.PhaseNet(load_checkpoint(base / ck["dccn_phase"]), geometry.ris_elements,
                            meta["phase_out_scale"])
        feat = dc.ChannelFeaturizer(nm.RisChannelModel(geometry, config.link))
        bundle = dc.DccnBundle(cap, phase, feat, meta["bits"], [], [], meta["holdout_rel_rmse"])
    elif config.scheme.spec.ris:
        raise MissingCheckpoint("RIS scheme manifest lacks the phase-optimizer checkpoints")
    curve = None
    if (base / "learning_curve.csv").is_file():
        _, _, rows = read_csv(base / "learning_curve.csv")
        curve = drl.LearningCurve(raw=[float(r[1]) for r in rows], window=config.learner.ppo.smooth_window
                                  if config.scheme.spec.learner == "ppo" else config.learner.dqn.smooth_window)
    return TrainedModel(config.scheme, agent, bundle, curve, manifest["training_hash"], manifest["seeds"][0],
                        float(manifest.get("train_seconds", 0.0)))


# ---------------------------------------------------------------- evaluation
@dataclass(frozen=True)
class ResultRow:
    scheme: str
    seed: int
    slot: int
    cumulative_energy_J: float
    active_bs_count: int
    pending_bits: float
    worst_delay_ms: float
    reward: float


RESULT_COLUMNS = tuple(f.name for f in dataclasses.fields(ResultRow))


def eval_seed(seed: int) -> int:
    return EVAL_SEED_BASE * (1 + int(seed))


def run_scheme(config: ExperimentConfig, model: Optional[TrainedModel] = None,
               train_first: bool = False, on_step: Optional[Callable] = None) -> list:
    """Greedy evaluation for every configured seed; one ResultRow per slot.

    Learned schemes need ``model`` (or ``train_first``).  The environment is
    reset at each episode end, and the cumulative energy is read from the
    energy ledgers so it matches them exactly.
    """
    spec = config.scheme.spec
    if spec.learner is not None and model is None:
        if not train_first:
            raise MissingCheckpoint(f"scheme {config.scheme.value} needs a trained checkpoint")
        model = train(config, config.seeds[0])
    if model is not None and model.scheme is not config.scheme:
        raise ManifestMismatch(f"model is for {model.scheme.value}, config asks for {config.scheme.value}")
    controller = drl.greedy_controller(None if model is None else model.agent)
    env = E.SleepZoomEnv(config.env_config(), ris_policy=None if model is None else model.ris_policy())
    rows = []
    for seed in config.seeds:
        base = eval_seed(seed)
        env.reset(base)
        episode, banked = 0, 0.0
        obs = env.observe()
        for t in range(config.duration):
            out = env.step(controller(obs, env))
            total = banked + env.system_energy()
            rows.append(ResultRow(config.scheme.value, int(seed), t + 1, total, out.info["active_bs"],
                                  out.info["pending_bits"], out.info["worst_delay_ms"], float(out.reward)))
            if on_step is not None:
                on_step(seed, t, out, env)
            if out.done:
                banked = total
                episode += 1
                env.reset(base + episode)
            obs = env.observe()
    return rows


def final_energy(rows: Sequence[ResultRow]) -> dict:
    """Final cumulative energy per seed."""
    out = {}
    for r in rows:
        out[r.seed] = r.cumulative_energy_J
    return out


def median_energy(rows: Sequence[ResultRow]) -> float:
    return float(np.median(list(final_energy(rows).values())))


def apply_sweep_value(config: ExperimentConfig, parameter: str, value) -> ExperimentConfig:
    if parameter == "packet_size":
        return config.with_(traffic=dataclasses.replace(config.traffic, packet_size=float(value)))
    if parameter == "mean_interarrival":
        return config.with_(traffic=dataclasses.replace(config.traffic, mean_interarrival=float(value)))
    if parameter == "user_count":
        return config.with_(traffic=dataclasses.replace(config.traffic, active_users=int(value)))
    raise ConfigError(f"sweep.param: {parameter!r} is not one of {list(SWEEP_PARAMS)}")


@dataclass(frozen=True)
class SweepRow:
    parameter: str
    value: float
    scheme: str
    median_energy_J: float
    seed_energies_J: tuple
    mean_reward: float
    violation_rate: float


def sweep(config: ExperimentConfig, parameter: str, values: Sequence, models: Optional[dict] = None,
          schemes: Optional[Sequence] = None) -> list:
    """Evaluate each scheme at each parameter value with fixed trained models.

    ``models`` maps scheme to a :class:`TrainedModel` trained on ``config``;
    the sweep changes only the evaluation traffic.
    """
    if not len(values):
        raise ConfigError("sweep.values: must be nonempty")
    schemes = [E.Scheme(s) for s in (schemes or [config.scheme])]
    models = models or {}
    out = []
    for value in values:
        for scheme in schemes:
            cfg = apply_sweep_value(config.with_(scheme=scheme), parameter, value)
            rows = run_scheme(cfg, models.get(scheme))
            per_seed = final_energy(rows)
            rewards = [r.reward for r in rows]
            viol = sum(1 for r in rows if r.pending_bits > 0 and r.worst_delay_ms >= cfg.reward.d_max)
            out.append(SweepRow(parameter, float(value), scheme.value, float(np.median(list(per_seed.values()))),
                                tuple(per_seed[s] for s in cfg.seeds), float(np.mean(rewards)) if rewards else 0.0,
                                viol / len(rows) if rows else 0.0))
    return out


# ---------------------------------------------------------------- CSV output
def _write_csv(path, header: Sequence[str], rows, cfg_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def read_csv(path) -> tuple:
    """``(config_hash, header, rows)`` of a file written by this module."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        cfg_hash = first.split("=", 1)[1] if first.startswith("# config_hash=") else None
        rows = list(csv.reader(fh))
    return cfg_hash, rows[0], rows[1:]


def write_results(path, rows: Sequence[ResultRow], cfg_hash: str) -> None:
    _write_csv(path, RESULT_COLUMNS, [dataclasses.astuple(r) for r in rows], cfg_hash)


def write_sweep(path, rows: Sequence[SweepRow], cfg_hash: str) -> None:
    header = [f.name for f in dataclasses.fields(SweepRow)]
    body = []
    for r in rows:
        t = list(dataclasses.astuple(r))
        t[4] = "|".join(repr(float(v)) for v in r.seed_energies_J)
        body.append(t)
    _write_csv(path, header, body, cfg_hash)


def write_learning_curve(path, curve: drl.LearningCurve, cfg_hash: str) -> None:
    _write_csv(path, ("iteration", "raw_reward", "smoothed_reward"), curve.rows(), cfg_hash)


# ---------------------------------------------------------------- oracle comparison
def oracle_comparison(elements: int, bits: int, channels: int, train_channels: int = 2000, seed: int = 0,
                      dccn: Optional[DccnConfig] = None) -> list:
    """Train the phase optimizer on a small RIS and compare it with exhaustive search.

    Returns ``(oracle_capacity, dccn_capacity)`` pairs for ``channels``
    held-out channels with random non-empty associations.
    """
    d = dccn or DccnConfig(n_capacity=train_channels, n_phase=train_channels)
    geometry = nm.NetworkGeometry.default(elements=elements)
    link = nm.LinkParams(quant_bits=bits)
    rng = np.random.default_rng(seed)
    bundle = dc.train_dccn(geometry, link, rng, n_capacity=d.n_capacity, n_phase=d.n_phase,
                           cap_epochs=d.cap_epochs, phase_epochs=d.phase_epochs, lr=d.learning_rate,
                           p_link=d.p_link, ramp_fraction=d.ramp_fraction)
    model = nm.RisChannelModel(geometry, link)
    cover = dc.max_coverage(geometry)
    policy = bundle.policy()
    out = []
    for _ in range(channels):
        ch = model.sample(rng)
        z = dc.nonempty_association(rng, cover, d.p_link)
        _, best, _ = dc.exhaustive_phase_oracle(ch, link, z, bits)
        out.append((best, nm.sum_rate(ch, policy(ch, z), z, link)))
    return out


# ---------------------------------------------------------------- self test
def selftest() -> list:
    """Quick exact checks; returns ``(name, passed, detail)`` triples."""
    results = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # report, do not abort the remaining checks
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))

    def aa_ledger():
        cfg = ExperimentConfig(scheme=E.Scheme.AA, seeds=(1,), duration=1000)
        total = run_scheme(cfg)[-1].cumulative_energy_J
        return abs(total - 20.7) < 1e-9, f"{total!r} J"

    def idle_to_micro():
        table = bp.PowerTimingTable()
        s = bp.begin_transition(bp.BsStatus(mode=SmState.IDLE), SmState.MICRO, table)
        _, e = bp.advance_slot(s, table, 1.0)
        return abs(e.total_j - 1.5568e-3) < 1e-15, f"{e.total_j!r} J"

    def gae_oracle():
        rng = np.random.default_rng(0)
        r, v, d = rng.normal(size=40), rng.normal(size=40), rng.random(40) < 0.1
        got = drl.compute_gae(r, v, d, 0.3, 0.97, 0.9)
        ref = np.zeros(40)
        for t in range(40):
            acc, k_disc = 0.0, 1.0
            for k in range(t, 40):
                nxt = v[k + 1] if k + 1 < 40 else 0.3
                acc += k_disc * (r[k] + 0.97 * nxt * (1 - d[k]) - v[k])
                if d[k]:
                    break
                k_disc *= 0.97 * 0.9
            ref[t] = acc
        err = float(np.max(np.abs(got - ref)))
        return err <= 1e-12, f"max error {err:.1e}"

    def quantize_idempotent():
        x = np.random.default_rng(1).uniform(-10, 10, 1000)
        q = nm.quantize_phase(x, 3)
        return np.array_equal(q, nm.quantize_phase(q, 3)), "R=3"

    def round_trip():
        cfg = ExperimentConfig(scheme=E.Scheme.DSZR, seeds=(4, 5), duration=17)
        return parse_config(serialize(cfg)) == cfg, config_hash(cfg)

    check("always-active ledger 1000 slots = 20.7 J", aa_ledger)
    check("idle to micro slot energy", idle_to_micro)
    check("GAE matches double-loop oracle", gae_oracle)
    check("phase quantization idempotent", quantize_idempotent)
    check("config round trip", round_trip)
    return results


# ---------------------------------------------------------------- CLI
def output_root() -> Optional[Path]:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) if root else None


def resolve_out(path) -> Path:
    p = Path(path)
    root = output_root()
    return root / p if root is not None and not p.is_absolute() else p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sleepzoom", description="BS sleep, cell zooming and RIS energy simulator")
    sub = ap.add_subparsers(dest="command")
    t = sub.add_parser("train", help="train one scheme and write a checkpoint directory")
    t.add_argument("--scheme", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    e = sub.add_parser("eval", help="evaluate a trained checkpoint (never trains)")
    e.add_argument("--checkpoint", help="training directory or manifest; omit for AA")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    s = sub.add_parser("sweep", help="evaluate schemes over a traffic parameter")
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", action="append", default=[], help="training directory per learned scheme")
    s.add_argument("--schemes", help="comma-separated schemes (default: the config's scheme)")
    s.add_argument("--out", required=True)
    o = sub.add_parser("oracle-ris", help="phase optimizer vs exhaustive search on a small RIS")
    o.add_argument("--elements", type=int, required=True)
    o.add_argument("--bits", type=int, required=True)
    o.add_argument("--channels", type=int, required=True)
    o.add_argument("--train-channels", type=int, default=2000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", help="CSV path (default: stdout)")
    sub.add_parser("selftest", help="run the quick exact checks")
    return ap


class UsageError(Exception):
    pass


def _values(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values: cannot parse {text!r}") from None


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = cfg.with_(scheme=parse_scheme(args.scheme))
    if cfg.scheme.spec.learner is None:
        raise UsageError(f"scheme {cfg.scheme.value} has nothing to train")
    model = train(cfg, args.seed)
    path = save_model(model, cfg, resolve_out(args.out))
    print(path)
    return 0


def parse_scheme(name: str) -> E.Scheme:
    try:
        return E.Scheme(name)
    except ValueError:
        raise ConfigError(f"scheme: {name!r} is not one of {[s.value for s in E.Scheme]}") from None


def _cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = None
    if cfg.scheme.spec.learner is not None:
        if not args.checkpoint:
            raise UsageError(f"scheme {cfg.scheme.value} needs --checkpoint")
        model = load_model(args.checkpoint, cfg)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    completed = []
    traces = []

    def keep(seed, t, outcome, env):
        traces.append((seed, t + 1, outcome))
        if outcome.done or t + 1 == cfg.duration:
            completed.extend(env.queues.completed)

    rows = run_scheme(cfg, model, on_step=keep)
    h = config_hash(cfg)
    write_results(out / "results.csv", rows, h)
    _write_csv(out / "trace.csv", ("seed", "slot", "modes", "energy_J", "pending_bits", "worst_delay_ms", "reward"),
               [(s, t, "|".join(SmState(m).name for m in o.info["modes"]), o.info["energy_j"],
                 o.info["pending_bits"], o.info["worst_delay_ms"], float(o.reward)) for s, t, o in traces], h)
    _write_csv(out / "delays.csv", ("packet_id", "user", "arrival_slot", "delay_ms"), completed, h)
    for seed, total in final_energy(rows).items():
        print(f"{cfg.scheme.value} seed {seed}: {total:.6f} J")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    names = [s.strip() for s in args.schemes.split(",")] if args.schemes else [cfg.scheme.value]
    schemes = [parse_scheme(s) for s in names]
    models = {}
    for ck in args.checkpoint:
        manifest = Path(ck) / MANIFEST_NAME if Path(ck).is_dir() else Path(ck)
        if not manifest.is_file():
            raise MissingCheckpoint(f"no manifest at {manifest}")
        scheme = E.Scheme(json.loads(manifest.read_text())["scheme"])
        models[scheme] = load_model(ck, cfg.with_(scheme=scheme))
    for s in schemes:
        if s.spec.learner is not None and s not in models:
            raise MissingCheckpoint(f"scheme {s.value} needs a --checkpoint")
    rows = sweep(cfg, args.param, _values(args.values), models, schemes)
    out = resolve_out(args.out)
    write_sweep(out, rows, config_hash(cfg))
    print(out)
    return 0


def _cmd_oracle(args) -> int:
    if args.elements < 1 or args.bits < 1 or args.channels < 1:
        raise UsageError("--elements, --bits and --channels must be >= 1")
    pairs = oracle_comparison(args.elements, args.bits, args.channels, args.train_channels, args.seed)
    if args.out:
        _write_csv(resolve_out(args.out), ("oracle_capacity", "dccn_capacity"), pairs,
                   f"oracle-ris G={args.elements} R={args.bits} seed={args.seed}")
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["oracle_capacity", "dccn_capacity"])
        w.writerows([repr(a), repr(b)] for a, b in pairs)
    ratio = np.median([b / a for a, b in pairs if a > 0])
    print(f"median dccn/oracle = {ratio:.4f}", file=sys.stderr)
    return 0


def _cmd_selftest(args) -> int:
    results = selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return 0 if all(ok for _, ok, _ in results) else 1


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep, "oracle-ris": _cmd_oracle,
            "selftest": _cmd_selftest}


def cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
