"""Digital-twin model learning: conjugate Dirichlet posteriors over the
unknown transition factors (per-cluster arrival tables and the channel's
received-count table), posterior sampling, MAP estimation, and a simulator
driven by a sampled model.

Priors and integer event counts are kept separate so that posterior
concentrations are always exactly prior + counts, no matter how the data
was batched.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import env
from .config import ConfigError, DynamicsTables, SystemConfig, write_sections

ModelSample = DynamicsTables  # a sampled model is just a concrete set of tables


class MapUndefinedError(ValueError):
    """MAP estimate requested with some concentration parameter <= 1."""


def _dirichlet_rows(alpha: np.ndarray, rng: np.random.Generator, size: int | None) -> np.ndarray:
    """Dirichlet draw(s) for one concentration vector, stable for tiny alphas.

    Uses the boost identity Gamma(a) = Gamma(a+1) * U^(1/a) in log space, so
    shapes like 0.01 produce exact near-zero coordinates instead of the 0/0
    failures of naive gamma normalization.
    """
    alpha = np.asarray(alpha, dtype=float)
    shape = alpha.shape if size is None else (size,) + alpha.shape
    y = rng.standard_gamma(alpha + 1.0, size=shape)
    u = rng.random(shape)
    with np.errstate(divide="ignore"):
        log_x = np.log(y) + np.log1p(-u) / alpha
    log_x -= log_x.max(axis=-1, keepdims=True)
    x = np.exp(log_x)
    return x / x.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class DirichletTable:
    """One Dirichlet row per conditioning context; alpha = prior + counts."""

    prior: tuple[np.ndarray, ...]
    counts: tuple[np.ndarray, ...]

    @property
    def alpha(self) -> tuple[np.ndarray, ...]:
        return tuple(p + c for p, c in zip(self.prior, self.counts))

    @property
    def num_contexts(self) -> int:
        return len(self.prior)

    def add_counts(self, extra: Sequence[np.ndarray]) -> "DirichletTable":
        return DirichletTable(
            prior=self.prior,
            counts=tuple(c + e for c, e in zip(self.counts, extra)),
        )

    def mean_rows(self) -> list[np.ndarray]:
        return [a / a.sum() for a in self.alpha]

    def map_rows(self) -> list[np.ndarray]:
        rows = []
        for i, a in enumerate(self.alpha):
            if np.any(a <= 1.0):
                raise MapUndefinedError(
                    f"context {i}: MAP undefined for concentration <= 1 (min {a.min()})"
                )
            rows.append((a - 1.0) / (a - 1.0).sum())
        return rows

    def sample_rows(self, rng: np.random.Generator, size: int | None = None) -> list[np.ndarray]:
        return [_dirichlet_rows(a, rng, size) for a in self.alpha]


def _uniform_table(alpha0: float, n_contexts: int, outcomes: Sequence[int]) -> DirichletTable:
    return DirichletTable(
        prior=tuple(np.full(n_out, alpha0) for n_out in outcomes),
        counts=tuple(np.zeros(n_out, dtype=np.int64) for n_out in outcomes),
    )


@dataclass(frozen=True)
class PosteriorModel:
    """Posterior over every unknown factor; immutable, updates return a new one."""

    clusters: tuple[tuple[int, ...], ...]
    num_devices: int
    gen: tuple[DirichletTable, ...]
    mpr: DirichletTable

    def validate_for(self, config: SystemConfig) -> None:
        if self.clusters != config.clusters or self.num_devices != config.num_devices:
            raise ConfigError("posterior structure does not match the system config")


def init_prior(config: SystemConfig, alpha0: float) -> PosteriorModel:
    if not alpha0 > 0:
        raise ValueError(f"prior concentration must be positive, got {alpha0}")
    gen = []
    for members in config.clusters:
        size = 2 ** len(members)
        gen.append(_uniform_table(alpha0, size, [size] * size))
    k = config.num_devices
    mpr = _uniform_table(alpha0, k, [n_tx + 1 for n_tx in range(1, k + 1)])
    return PosteriorModel(
        clusters=config.clusters, num_devices=k, gen=tuple(gen), mpr=mpr
    )


def count_events(
    posterior: PosteriorModel, records: Sequence[env.TransitionRecord]
) -> tuple[list[list[np.ndarray]], list[np.ndarray]]:
    """Per-factor event counts for a record sequence; rejects malformed records."""
    k = posterior.num_devices
    gen_counts = [
        [np.zeros_like(c) for c in table.counts] for table in posterior.gen
    ]
    mpr_counts = [np.zeros_like(c) for c in posterior.mpr.counts]
    for idx, rec in enumerate(records):
        try:
            _check_record(rec, k)
        except ValueError as exc:
            raise ValueError(f"record {idx}: {exc}") from exc
        for i, members in enumerate(posterior.clusters):
            ctx = int(env.pattern_index(rec.state.g, members))
            nxt = int(env.pattern_index(rec.next_state.g, members))
            gen_counts[i][ctx][nxt] += 1
        n_tx = int(np.asarray(rec.action).sum())
        if n_tx >= 1:  # idle slots carry no channel information
            n_rx = int(rec.next_state.d.sum())
            mpr_counts[n_tx - 1][n_rx] += 1
    return gen_counts, mpr_counts


def _check_record(rec: env.TransitionRecord, k: int) -> None:
    action = np.asarray(rec.action)
    for name, arr in (("q", rec.state.q), ("g", rec.state.g), ("d", rec.state.d),
                      ("action", action)):
        if np.asarray(arr).shape != (k,):
            raise ValueError(f"{name} has shape {np.asarray(arr).shape}, expected ({k},)")
    for name, arr in (("g", rec.state.g), ("d", rec.state.d),
                      ("next g", rec.next_state.g), ("next d", rec.next_state.d),
                      ("action", action)):
        if np.any((np.asarray(arr) != 0) & (np.asarray(arr) != 1)):
            raise ValueError(f"{name} entries must be binary")
    if np.any(action > rec.state.q):
        raise ValueError("action transmits from an empty buffer")
    if np.any(rec.next_state.d > action):
        raise ValueError("delivery without transmission")


def update_posterior(
    posterior: PosteriorModel, records: Sequence[env.TransitionRecord]
) -> PosteriorModel:
    gen_counts, mpr_counts = count_events(posterior, records)
    return PosteriorModel(
        clusters=posterior.clusters,
        num_devices=posterior.num_devices,
        gen=tuple(t.add_counts(c) for t, c in zip(posterior.gen, gen_counts)),
        mpr=posterior.mpr.add_counts(mpr_counts),
    )


def posterior_mean(posterior: PosteriorModel) -> ModelSample:
    return DynamicsTables(
        gen=tuple(np.stack(t.mean_rows()) for t in posterior.gen),
        mpr=tuple(posterior.mpr.mean_rows()),
    )


def map_estimate(posterior: PosteriorModel) -> ModelSample:
    return DynamicsTables(
        gen=tuple(np.stack(t.map_rows()) for t in posterior.gen),
        mpr=tuple(posterior.mpr.map_rows()),
    )


def sample_model(posterior: PosteriorModel, rng: np.random.Generator) -> ModelSample:
    return DynamicsTables(
        gen=tuple(np.stack(t.sample_rows(rng)) for t in posterior.gen),
        mpr=tuple(posterior.mpr.sample_rows(rng)),
    )


def sample_models_batch(
    posterior: PosteriorModel, batch: int, rng: np.random.Generator
) -> DynamicsTables:
    """Batched draw: gen[i] is (batch, n_ctx, n_out), mpr[n] is (batch, n+2)."""
    gen = []
    for table in posterior.gen:
        rows = table.sample_rows(rng, size=batch)  # list of (batch, n_out)
        gen.append(np.stack(rows, axis=1))
    mpr = tuple(np.asarray(r) for r in posterior.mpr.sample_rows(rng, size=batch))
    return DynamicsTables(gen=tuple(gen), mpr=mpr)


def model_step(
    theta: ModelSample,
    state: env.SystemState,
    action: np.ndarray,
    config: SystemConfig,
    rng: np.random.Generator,
) -> env.StepOutcome:
    """Same composition as the ground-truth step with theta's tables; the
    buffer rule and the uniform-subset channel symmetry are kept as known."""
    return env.step_with_tables(state, action, theta, config, rng)


def model_transition_probability(
    theta: ModelSample,
    state: env.SystemState,
    action: np.ndarray,
    next_state: env.SystemState,
    config: SystemConfig,
) -> float:
    return env.transition_probability_tables(state, action, next_state, theta, config)


# ---------------------------------------------------------------------------
# Posterior artifacts (same structured text format as configs)


def save_posterior(path: str | Path, posterior: PosteriorModel) -> None:
    items: dict = {
        "devices": posterior.num_devices,
        "clusters": [[dev + 1 for dev in members] for members in posterior.clusters],
    }
    for i, table in enumerate(posterior.gen, start=1):
        items[f"gen{i}_prior"] = [row.tolist() for row in table.prior]
        items[f"gen{i}_counts"] = [row.tolist() for row in table.counts]
    items["mpr_prior"] = [row.tolist() for row in posterior.mpr.prior]
    items["mpr_counts"] = [row.tolist() for row in posterior.mpr.counts]
    write_sections(path, {"posterior": items})


def load_posterior(path: str | Path) -> PosteriorModel:
    import configparser
    import json

    parser = configparser.ConfigParser(interpolation=None)
    if not Path(path).exists():
        raise ConfigError(f"posterior file not found: {path}")
    parser.read(path)
    if not parser.has_section("posterior"):
        raise ConfigError(f"{path}: missing [posterior] section")
    raw = {key: json.loads(val) for key, val in parser.items("posterior")}
    clusters = tuple(tuple(dev - 1 for dev in members) for members in raw["clusters"])
    gen = []
    for i in range(1, len(clusters) + 1):
        gen.append(
            DirichletTable(
                prior=tuple(np.asarray(r, dtype=float) for r in raw[f"gen{i}_prior"]),
                counts=tuple(np.asarray(r, dtype=np.int64) for r in raw[f"gen{i}_counts"]),
            )
        )
    mpr = DirichletTable(
        prior=tuple(np.asarray(r, dtype=float) for r in raw["mpr_prior"]),
        counts=tuple(np.asarray(r, dtype=np.int64) for r in raw["mpr_counts"]),
    )
    return PosteriorModel(
        clusters=clusters, num_devices=int(raw["devices"]), gen=tuple(gen), mpr=mpr
    )
