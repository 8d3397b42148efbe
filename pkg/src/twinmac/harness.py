"""Experiment orchestration: exploration-phase data collection, the
learn/optimize/evaluate cycle in its three modes, policy evaluation in the
ground-truth system, and the policy-sweep and anomaly-ROC experiments.

All randomness is derived from (seed, fixed tag ints, loop indices) so every
cycle and phase is reproducible independently of execution order.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import coma, env, model, monitor
from .config import Config, DynamicsTables, SystemConfig, with_anomalous_generation
from .nets import Actor

MODE_IDS = {"bayesian": 0, "frequentist": 1, "oracle": 2}

# Tag ints namespacing the derived RNG streams.
_TAG_DATA, _TAG_TRAIN, _TAG_EVAL = 101, 102, 103
_TAG_ROC_POLICY, _TAG_ROC_PHASE = 201, 202


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(t) for t in tags]]))


# ---------------------------------------------------------------------------
# Policies (shared duck-typed interface: transmit_probs(q, g, d, p, rng) -> (B, K))


class ExplorationPolicy:
    """One fresh attempt probability per slot, shared by all devices; each
    device then transmits independently with that probability if its buffer
    is non-empty."""

    def transmit_probs(self, q, g, d, p, rng):
        del g, d, p
        qt = rng.random(q.shape[0])
        return np.where(q >= 1, qt[:, None], 0.0)


class AlwaysIdlePolicy:
    def transmit_probs(self, q, g, d, p, rng=None):
        return np.zeros_like(q, dtype=float)


class AlwaysTransmitPolicy:
    def transmit_probs(self, q, g, d, p, rng=None):
        return (q >= 1).astype(float)


class PPersistentPolicy:
    def __init__(self, p_transmit: float):
        self.p_transmit = float(p_transmit)

    def transmit_probs(self, q, g, d, p, rng=None):
        return np.where(q >= 1, self.p_transmit, 0.0)


# ---------------------------------------------------------------------------
# Simulation in the ground-truth (or substituted) system


def rollout(
    policy,
    config: SystemConfig,
    steps: int,
    episodes: int,
    rng: np.random.Generator,
    tables: DynamicsTables | None = None,
):
    """Batched closed-loop simulation; returns (q, g, d, actions, rewards, overflow)."""
    tables = config.tables if tables is None else tables
    k = config.num_devices
    st = env.prepare_tables(tables, k)
    q = np.zeros((episodes, steps + 1, k), dtype=np.int64)
    g = np.zeros_like(q)
    d = np.zeros_like(q)
    actions = np.zeros((episodes, steps, k), dtype=np.int64)
    rewards = np.zeros((episodes, steps))
    overflow = np.zeros((episodes, steps, k), dtype=np.int64)
    q[:, 0], g[:, 0], d[:, 0] = env.initial_state_batch(tables, config, episodes, rng)
    for t in range(steps):
        probs = policy.transmit_probs(q[:, t], g[:, t], d[:, t], t, rng)
        a = ((rng.random((episodes, k)) < probs) & (q[:, t] >= 1)).astype(np.int64)
        q2, g2, d2, rew, over = env.step_batch(q[:, t], g[:, t], d[:, t], a, st, config, rng)
        q[:, t + 1], g[:, t + 1], d[:, t + 1] = q2, g2, d2
        actions[:, t] = a
        rewards[:, t] = rew
        overflow[:, t] = over
    return q, g, d, actions, rewards, overflow


def simulate_trajectory(
    policy,
    config: SystemConfig,
    steps: int,
    rng: np.random.Generator,
    tables: DynamicsTables | None = None,
) -> env.Trajectory:
    q, g, d, actions, rewards, _ = rollout(policy, config, steps, 1, rng, tables)
    return env.Trajectory(q=q[0], g=g[0], d=d[0], actions=actions[0], rewards=rewards[0])


def collect_learning_data(
    config: SystemConfig, num_steps: int, rng: np.random.Generator
) -> list[env.TransitionRecord]:
    """Exploration experience of `num_steps` slots -> num_steps - 1 chained records."""
    transitions = max(num_steps - 1, 0)
    traj = simulate_trajectory(ExplorationPolicy(), config, transitions, rng)
    return traj.records()


@dataclass(frozen=True)
class MetricsRow:
    mode: str
    learning_steps: int
    cycle: int
    throughput: float  # delivered packets per slot
    overflow_prob: float  # per device per slot
    discounted_return: float


def evaluate_policy(
    policy,
    config: SystemConfig,
    horizon: int,
    episodes: int,
    rng: np.random.Generator,
    mode: str = "",
    learning_steps: int = -1,
    cycle: int = -1,
) -> MetricsRow:
    q, g, d, actions, rewards, overflow = rollout(policy, config, horizon, episodes, rng)
    del q, g, actions
    returns = rewards @ (config.gamma ** np.arange(horizon))
    return MetricsRow(
        mode=mode,
        learning_steps=learning_steps,
        cycle=cycle,
        throughput=float(d[:, 1:, :].sum(axis=2).mean()),
        overflow_prob=float(overflow.mean()),
        discounted_return=float(returns.mean()),
    )


# ---------------------------------------------------------------------------
# One model-learning + policy-optimization + evaluation cycle


def _learn_source(
    mode: str, learning_steps: int, cfg: Config, rng: np.random.Generator
) -> coma.ModelSource:
    if mode == "oracle":
        return cfg.system.tables
    records = collect_learning_data(cfg.system, learning_steps, rng)
    if mode == "bayesian":
        prior = model.init_prior(cfg.system, cfg.learning.bayes_prior)
        return model.update_posterior(prior, records)
    if mode == "frequentist":
        prior = model.init_prior(cfg.system, cfg.learning.map_prior)
        return model.map_estimate(model.update_posterior(prior, records))
    raise ValueError(f"unknown mode {mode!r}")


def train_for_mode(
    mode: str, learning_steps: int, cfg: Config, seed: int, cycle: int
) -> coma.TrainResult:
    size_tag = 0 if mode == "oracle" else learning_steps  # the oracle ignores T
    rng_data = derive_rng(seed, _TAG_DATA, MODE_IDS[mode], size_tag, cycle)
    source = _learn_source(mode, learning_steps, cfg, rng_data)
    tc = cfg.training
    if mode == "oracle":
        tc = replace(tc, iterations=tc.iterations * tc.oracle_iteration_multiplier)
    rng_train = derive_rng(seed, _TAG_TRAIN, MODE_IDS[mode], size_tag, cycle)
    return coma.train(source, cfg.system, tc, rng_train)


def run_cycle(mode: str, learning_steps: int, cfg: Config, seed: int, cycle: int) -> MetricsRow:
    """collect -> learn -> optimize -> evaluate in the ground truth."""
    result = train_for_mode(mode, learning_steps, cfg, seed, cycle)
    size_tag = 0 if mode == "oracle" else learning_steps
    rng_eval = derive_rng(seed, _TAG_EVAL, MODE_IDS[mode], size_tag, cycle)
    return evaluate_policy(
        result.actor, cfg.system,
        cfg.experiment.eval_horizon, cfg.experiment.eval_episodes, rng_eval,
        mode=mode, learning_steps=learning_steps, cycle=cycle,
    )


def experiment_policy_sweep(cfg: Config, seed: int) -> list[MetricsRow]:
    """The dataset-size sweep: every (mode, size, cycle) with oracle runs shared
    across sizes (the oracle uses no learning data, so its row is size-free)."""
    exp = cfg.experiment
    rows: list[MetricsRow] = []
    for cycle in range(exp.cycles):
        for mode in exp.modes:
            if mode == "oracle":
                base = run_cycle("oracle", -1, cfg, seed, cycle)
                rows.extend(
                    replace(base, learning_steps=size) for size in exp.learning_sizes
                )
            else:
                rows.extend(
                    run_cycle(mode, size, cfg, seed, cycle)
                    for size in exp.learning_sizes
                )
    rows.sort(key=lambda r: (r.mode, r.learning_steps, r.cycle))
    return rows


# ---------------------------------------------------------------------------
# Anomaly-detection ROC experiment


@dataclass(frozen=True)
class DetectorResult:
    learning_steps: int
    detector: str
    curves: list  # per phase: list of (threshold, fpr, tpr)
    aucs: np.ndarray  # (phases,)
    fpr_grid: np.ndarray
    mean_tpr: np.ndarray

    def fpr_at_tpr(self, target: float) -> float:
        return monitor.fpr_at_tpr(self.fpr_grid, self.mean_tpr, target)


@dataclass(frozen=True)
class RocExperimentResult:
    policy_learning_steps: int
    detectors: dict  # (detector, learning_steps) -> DetectorResult

    def paired_wins(self, learning_steps: int) -> int:
        bayes = self.detectors[("bayesian", learning_steps)].aucs
        freq = self.detectors[("frequentist", learning_steps)].aucs
        return int((bayes > freq).sum())


def _windows(
    policy, system: SystemConfig, window_steps: int, count: int, rng: np.random.Generator
) -> list[list[env.TransitionRecord]]:
    transitions = window_steps - 1
    q, g, d, actions, _, _ = rollout(policy, system, transitions, count, rng)
    return [
        env.records_from_arrays(q[i], g[i], d[i], actions[i]) for i in range(count)
    ]


def monitoring_policy(cfg: Config, seed: int) -> Actor:
    """The operating policy reused across all monitoring phases."""
    result = train_for_mode(
        "bayesian", cfg.experiment.policy_learning_steps, cfg, seed, _TAG_ROC_POLICY
    )
    return result.actor


def experiment_anomaly_roc(cfg: Config, seed: int, policy: Actor | None = None) -> RocExperimentResult:
    exp = cfg.experiment
    mon = cfg.monitoring
    if policy is None:
        policy = monitoring_policy(cfg, seed)
    anomalous_system = with_anomalous_generation(cfg)

    detectors: dict = {}
    for size in exp.roc_sizes:
        curves = {"bayesian": [], "frequentist": []}
        aucs = {"bayesian": [], "frequentist": []}
        for phase in range(exp.phases):
            rng = derive_rng(seed, _TAG_ROC_PHASE, size, phase)
            records = collect_learning_data(cfg.system, size, rng)
            bayes_prior = model.init_prior(cfg.system, cfg.learning.bayes_prior)
            bayes_post = model.update_posterior(bayes_prior, records)
            freq_prior = model.init_prior(cfg.system, cfg.learning.map_prior)
            theta_map = model.map_estimate(model.update_posterior(freq_prior, records))

            nominal = _windows(policy, cfg.system, mon.window_steps, mon.windows_per_class, rng)
            anomalous = _windows(policy, anomalous_system, mon.window_steps, mon.windows_per_class, rng)

            scores = {"bayesian": {"nominal": [], "anomalous": []},
                      "frequentist": {"nominal": [], "anomalous": []}}
            for label, windows in (("nominal", nominal), ("anomalous", anomalous)):
                for recs in windows:
                    s_b = monitor.disagreement_score(
                        bayes_post, recs, mon.num_model_samples, mon.ll_kind, rng,
                        cfg.system, cluster=mon.cluster,
                    )
                    s_f = monitor.frequentist_score(theta_map, recs, mon.cluster, cfg.system)
                    scores["bayesian"][label].append(s_b.value)
                    scores["frequentist"][label].append(s_f.value)
            for det in ("bayesian", "frequentist"):
                points, auc = monitor.roc_curve(
                    scores[det]["nominal"], scores[det]["anomalous"]
                )
                curves[det].append(points)
                aucs[det].append(auc)
        for det in ("bayesian", "frequentist"):
            grid, mean_tpr = monitor.average_roc(curves[det])
            detectors[(det, size)] = DetectorResult(
                learning_steps=size,
                detector=det,
                curves=curves[det],
                aucs=np.array(aucs[det]),
                fpr_grid=grid,
                mean_tpr=mean_tpr,
            )
    return RocExperimentResult(
        policy_learning_steps=exp.policy_learning_steps, detectors=detectors
    )
