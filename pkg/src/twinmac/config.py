"""Configuration types and the structured text config format.

Config files are INI-style sections ([system], [learning], [training],
[monitoring], [experiment]) whose values are JSON literals, so tables are
plain nested arrays. The same format is reused for saved posterior models.
"""
from __future__ import annotations

import configparser
import importlib.resources
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

ROW_SUM_TOL = 1e-9


class ConfigError(ValueError):
    """Raised for structurally invalid configuration."""


def stationary_distribution(transition: np.ndarray, iters: int = 512) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix.

    Cesaro-averaged power iteration from the uniform distribution; converges
    for any finite chain, including periodic and reducible ones (it returns
    the average law reachable from uniform). Supports batched (..., n, n).
    """
    p = np.asarray(transition, dtype=float)
    n = p.shape[-1]
    pi = np.full(p.shape[:-2] + (n,), 1.0 / n)
    acc = np.zeros_like(pi)
    for _ in range(iters):
        pi = np.einsum("...i,...ij->...j", pi, p)
        acc += pi
    acc /= iters
    return acc / acc.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class DynamicsTables:
    """Concrete row-stochastic tables driving the network dynamics.

    gen[i] is the per-cluster generation table, shape (2^c, 2^c) where c is
    the cluster size; row index is the current cluster bit pattern (first
    listed device = least significant bit), column index the next pattern.
    mpr[n-1] is the received-count distribution given n transmitters,
    a vector of length n+1 over outcomes 0..n.
    """

    gen: tuple[np.ndarray, ...]
    mpr: tuple[np.ndarray, ...]

    @property
    def num_devices(self) -> int:
        return len(self.mpr)

    def validate(self, clusters: tuple[tuple[int, ...], ...]) -> None:
        if len(self.gen) != len(clusters):
            raise ConfigError(
                f"{len(self.gen)} generation tables for {len(clusters)} clusters"
            )
        for i, (tab, members) in enumerate(zip(self.gen, clusters)):
            size = 2 ** len(members)
            if tab.shape != (size, size):
                raise ConfigError(
                    f"generation table {i} has shape {tab.shape}, expected {(size, size)}"
                )
            if np.any(tab < 0) or np.any(np.abs(tab.sum(axis=1) - 1.0) > ROW_SUM_TOL):
                raise ConfigError(f"generation table {i} rows must sum to 1")
        k = self.num_devices
        for n_tx, row in enumerate(self.mpr, start=1):
            if row.shape != (n_tx + 1,):
                raise ConfigError(
                    f"channel row for {n_tx} transmitters has length {row.shape[0]},"
                    f" expected {n_tx + 1}"
                )
            if np.any(row < 0) or abs(row.sum() - 1.0) > ROW_SUM_TOL:
                raise ConfigError(f"channel row for {n_tx} transmitters must sum to 1")
        if k < max(max(m) for m in clusters) + 1:
            raise ConfigError("channel table covers fewer devices than the clusters")


@dataclass(frozen=True)
class SystemConfig:
    """Ground-truth description of the multi-device random-access system."""

    num_devices: int
    clusters: tuple[tuple[int, ...], ...]  # 0-based device indices
    q_max: np.ndarray  # (K,) per-device buffer capacity
    tables: DynamicsTables
    beta: np.ndarray  # (K,) per-device reward weights
    xi: float
    gamma: float

    def validate(self) -> None:
        k = self.num_devices
        seen = sorted(dev for members in self.clusters for dev in members)
        if seen != list(range(k)):
            raise ConfigError("clusters must partition the device set exactly")
        if self.q_max.shape != (k,) or np.any(self.q_max < 1):
            raise ConfigError("q_max must be a positive integer per device")
        if self.beta.shape != (k,):
            raise ConfigError("beta must have one weight per device")
        if not self.xi > 0:
            raise ConfigError("xi must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if len(self.tables.mpr) != k:
            raise ConfigError("channel table must have one row per transmitter count 1..K")
        self.tables.validate(self.clusters)

    def cluster_of(self, device: int) -> int:
        for i, members in enumerate(self.clusters):
            if device in members:
                return i
        raise ConfigError(f"device {device} not in any cluster")


@dataclass(frozen=True)
class LearningConfig:
    bayes_prior: float = 0.01
    map_prior: float = 1.01


@dataclass(frozen=True)
class TrainConfig:
    """Policy-optimization budget and hyperparameters."""

    horizon: int = 100
    episodes_per_iter: int = 32
    iterations: int = 200
    resample_period: float = 1  # episodes per model redraw; inf = one model per batch
    td_lambda: float = 0.5
    entropy_weight: float = 0.01  # decayed linearly to 0 over the iteration budget
    actor_lr: float = 1e-3
    critic_lr: float = 3e-3
    critic_steps: int = 4
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    position_period: int = 10  # F, the periodic slot-index input
    eval_every: int = 5
    plateau_patience: int = 8
    plateau_tol: float = 0.01
    oracle_iteration_multiplier: int = 10
    reward_scale: float | None = None  # None = auto (1/xi); used only inside training
    net_dtype: str = "float32"  # training-time precision; gradient checks build float64 nets

    def validate(self) -> None:
        positive = (
            "horizon", "episodes_per_iter", "position_period",
            "eval_every", "plateau_patience", "critic_steps",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 <= self.td_lambda <= 1.0:
            raise ConfigError("td_lambda must lie in [0, 1]")
        if self.resample_period < 1:
            raise ConfigError("resample_period must be >= 1 (may be inf)")


@dataclass(frozen=True)
class MonitoringConfig:
    window_steps: int = 20  # slots per monitoring window (T^M)
    num_model_samples: int = 50
    ll_kind: str = "cluster"  # "cluster" or "full"
    cluster: int = 0  # 0-based cluster index scored by the cluster log-likelihood
    anomalous_rows: np.ndarray | None = None  # replacement generation table for `cluster`
    windows_per_class: int = 200

    def validate(self) -> None:
        if self.window_steps < 2:
            raise ConfigError("window_steps must be >= 2 to contain a transition")
        if self.num_model_samples < 2:
            raise ConfigError("num_model_samples must be >= 2")
        if self.ll_kind not in ("cluster", "full"):
            raise ConfigError("ll_kind must be 'cluster' or 'full'")


@dataclass(frozen=True)
class ExperimentConfig:
    learning_sizes: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 10, 20)
    cycles: int = 50
    modes: tuple[str, ...] = ("bayesian", "frequentist", "oracle")
    eval_horizon: int = 100
    eval_episodes: int = 64
    roc_sizes: tuple[int, ...] = (20, 50)
    phases: int = 50
    policy_learning_steps: int = 50  # dataset size for the monitoring policy's training

    def validate(self) -> None:
        if self.cycles < 1 or self.phases < 1:
            raise ConfigError("cycles and phases must be >= 1")
        for mode in self.modes:
            if mode not in ("bayesian", "frequentist", "oracle"):
                raise ConfigError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class Config:
    """Everything loaded from one config file."""

    system: SystemConfig
    learning: LearningConfig = field(default_factory=LearningConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    monitoring: MonitoringConfig = field(default_factory=MonitoringConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def validate(self) -> None:
        self.system.validate()
        self.training.validate()
        self.monitoring.validate()
        self.experiment.validate()
        if self.monitoring.cluster >= len(self.system.clusters):
            raise ConfigError("monitoring.cluster out of range")
        if self.monitoring.anomalous_rows is not None:
            size = 2 ** len(self.system.clusters[self.monitoring.cluster])
            if self.monitoring.anomalous_rows.shape != (size, size):
                raise ConfigError("monitoring.anomalous_rows shape mismatch")


# ---------------------------------------------------------------------------
# File format


def _parse_section(parser: configparser.ConfigParser, name: str) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"[{name}] {key}: invalid JSON value ({exc})") from exc
    return out


def _system_from_dict(raw: dict) -> SystemConfig:
    try:
        clusters = tuple(tuple(dev - 1 for dev in members) for members in raw["clusters"])
        gen = tuple(np.asarray(t, dtype=float) for t in raw["gen_tables"])
        mpr = tuple(np.asarray(r, dtype=float) for r in raw["mpr_rows"])
        cfg = SystemConfig(
            num_devices=int(raw["devices"]),
            clusters=clusters,
            q_max=np.asarray(raw["buffer_capacity"], dtype=int),
            tables=DynamicsTables(gen=gen, mpr=mpr),
            beta=np.asarray(raw["beta"], dtype=float),
            xi=float(raw["xi"]),
            gamma=float(raw["gamma"]),
        )
    except KeyError as exc:
        raise ConfigError(f"[system] missing key {exc.args[0]}") from exc
    cfg.validate()
    return cfg


def _dataclass_from_dict(cls, raw: dict, arrays: tuple[str, ...] = (), tuples: tuple[str, ...] = ()):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in arrays and value is not None:
            value = np.asarray(value, dtype=float)
        elif key in tuples and value is not None:
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path)
    if not parser.has_section("system"):
        raise ConfigError(f"{path}: missing [system] section")
    training_raw = _parse_section(parser, "training")
    if training_raw.get("resample_period") == "inf":
        training_raw["resample_period"] = float("inf")
    cfg = Config(
        system=_system_from_dict(_parse_section(parser, "system")),
        learning=_dataclass_from_dict(LearningConfig, _parse_section(parser, "learning")),
        training=_dataclass_from_dict(
            TrainConfig, training_raw, tuples=("actor_hidden", "critic_hidden")
        ),
        monitoring=_dataclass_from_dict(
            MonitoringConfig, _parse_section(parser, "monitoring"), arrays=("anomalous_rows",)
        ),
        experiment=_dataclass_from_dict(
            ExperimentConfig, _parse_section(parser, "experiment"),
            tuples=("learning_sizes", "modes", "roc_sizes"),
        ),
    )
    cfg.validate()
    return cfg


def _json_value(value) -> str:
    if isinstance(value, np.ndarray):
        value = value.tolist()
    elif isinstance(value, tuple):
        value = list(value)
    elif isinstance(value, (np.integer,)):
        value = int(value)
    elif isinstance(value, (np.floating,)):
        value = float(value)
    if isinstance(value, float) and value == float("inf"):
        return '"inf"'
    return json.dumps(value)


def write_sections(path: str | Path, sections: dict[str, dict]) -> None:
    """Write a sections->key->value mapping in the config file format."""
    lines = []
    for section, items in sections.items():
        lines.append(f"[{section}]")
        for key, value in items.items():
            lines.append(f"{key} = {_json_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def save_config(path: str | Path, cfg: Config) -> None:
    sys_items = {
        "devices": cfg.system.num_devices,
        "clusters": [[dev + 1 for dev in members] for members in cfg.system.clusters],
        "buffer_capacity": cfg.system.q_max,
        "gen_tables": [t for t in cfg.system.tables.gen],
        "mpr_rows": [r for r in cfg.system.tables.mpr],
        "beta": cfg.system.beta,
        "xi": cfg.system.xi,
        "gamma": cfg.system.gamma,
    }
    sys_items["gen_tables"] = [t.tolist() for t in cfg.system.tables.gen]
    sys_items["mpr_rows"] = [r.tolist() for r in cfg.system.tables.mpr]
    sections = {
        "system": sys_items,
        "learning": {f.name: getattr(cfg.learning, f.name) for f in fields(LearningConfig)},
        "training": {f.name: getattr(cfg.training, f.name) for f in fields(TrainConfig)},
        "monitoring": {f.name: getattr(cfg.monitoring, f.name) for f in fields(MonitoringConfig)},
        "experiment": {f.name: getattr(cfg.experiment, f.name) for f in fields(ExperimentConfig)},
    }
    write_sections(path, sections)


def default_config_path() -> Path:
    """Path of the config shipped with the package (the four-device study system)."""
    return Path(importlib.resources.files("twinmac") / "configs" / "default.cfg")


def load_default_config() -> Config:
    return load_config(default_config_path())


def with_anomalous_generation(cfg: Config) -> SystemConfig:
    """System with the monitored cluster's generation law replaced by the anomaly."""
    mon = cfg.monitoring
    if mon.anomalous_rows is None:
        raise ConfigError("monitoring.anomalous_rows is not configured")
    gen = list(cfg.system.tables.gen)
    gen[mon.cluster] = np.asarray(mon.anomalous_rows, dtype=float)
    tables = DynamicsTables(gen=tuple(gen), mpr=cfg.system.tables.mpr)
    system = replace(cfg.system, tables=tables)
    system.validate()
    return system
