"""Ground-truth simulator: clustered Markov packet arrivals, per-device FIFO
buffers, a shared multi-packet-reception channel, and the reward function.

Everything is a pure function of explicit state plus an injected numpy
Generator, so independent simulations can run in parallel on separate
streams. The batched helpers carry a leading episode axis and also accept
per-episode dynamics tables (leading batch axis on the tables) so that
model-sampled rollouts can mix different dynamics in one batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, DynamicsTables, SystemConfig, stationary_distribution

JointAction = np.ndarray  # (K,) binary; 1 = transmit head-of-line packet


@dataclass(frozen=True)
class DeviceObservation:
    """What one device sees in a slot: buffer fill, arrival flag, ACK flag."""

    q: int
    g: int
    d: int


@dataclass(frozen=True)
class SystemState:
    q: np.ndarray  # (K,) buffer occupancy
    g: np.ndarray  # (K,) new-packet flags
    d: np.ndarray  # (K,) delivery-ACK flags

    @property
    def num_devices(self) -> int:
        return self.q.shape[0]

    def observation(self, device: int) -> DeviceObservation:
        return DeviceObservation(int(self.q[device]), int(self.g[device]), int(self.d[device]))

    @property
    def observations(self) -> tuple[DeviceObservation, ...]:
        return tuple(self.observation(k) for k in range(self.num_devices))


@dataclass(frozen=True)
class StepOutcome:
    next_state: SystemState
    reward: float
    delivered: np.ndarray  # (K,) = next_state.d
    overflow: np.ndarray  # (K,) buffer-overflow indicators


@dataclass(frozen=True)
class TransitionRecord:
    state: SystemState
    action: np.ndarray
    next_state: SystemState


def pattern_index(bits: np.ndarray, members: Sequence[int]) -> np.ndarray:
    """Cluster bit pattern -> row index; first member is the least significant bit."""
    bits = np.asarray(bits)
    idx = np.zeros(bits.shape[:-1], dtype=np.int64)
    for j, dev in enumerate(members):
        idx = idx + (bits[..., dev].astype(np.int64) << j)
    return idx


def pattern_bits(index: np.ndarray, size: int) -> np.ndarray:
    """Inverse of pattern_index: (...,) int -> (..., size) bits."""
    index = np.asarray(index, dtype=np.int64)
    return np.stack([(index >> j) & 1 for j in range(size)], axis=-1)


# ---------------------------------------------------------------------------
# Sampling machinery (shared by the ground truth and learned-model rollouts)


def _row_cdf(table: np.ndarray) -> np.ndarray:
    """Cumulative rows with the final column forced to exactly 1."""
    cdf = np.cumsum(np.asarray(table, dtype=float), axis=-1)
    cdf[..., -1] = 1.0
    return cdf


def padded_mpr_cdf(mpr: Sequence[np.ndarray], num_devices: int) -> np.ndarray:
    """(..., K+1, K+1) cumulative table over received counts, row = n_tx 0..K.

    Entries past a row's support are pinned at 1 so inverse-CDF draws can
    never land on an impossible count.
    """
    batch = np.asarray(mpr[0]).shape[:-1]
    k = num_devices
    cdf = np.ones(batch + (k + 1, k + 1), dtype=float)
    cdf[..., 0, :] = 1.0  # nobody transmits -> zero received with prob 1
    for n_tx, row in enumerate(mpr, start=1):
        c = np.cumsum(np.asarray(row, dtype=float), axis=-1)
        cdf[..., n_tx, : n_tx + 1] = c
        cdf[..., n_tx, n_tx:] = 1.0
    return cdf


def _sample_rows(cdf: np.ndarray, row_idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one categorical outcome per batch element from its own cdf row.

    cdf is (n_rows, n_out) shared across the batch or (B, n_rows, n_out).
    """
    if cdf.ndim == 2:
        rows = cdf[row_idx]
    else:
        rows = cdf[np.arange(row_idx.shape[0]), row_idx]
    u = rng.random(row_idx.shape[0])
    return (rows <= u[:, None]).sum(axis=1)


@dataclass(frozen=True)
class StepTables:
    """Cumulative-table form of DynamicsTables, ready for batched stepping."""

    gen_cdf: tuple[np.ndarray, ...]  # per cluster, (n_ctx, n_out) or (B, n_ctx, n_out)
    mpr_cdf: np.ndarray  # (K+1, K+1) or (B, K+1, K+1)


def prepare_tables(tables: DynamicsTables, num_devices: int) -> StepTables:
    return StepTables(
        gen_cdf=tuple(_row_cdf(t) for t in tables.gen),
        mpr_cdf=padded_mpr_cdf(tables.mpr, num_devices),
    )


def prepare_tables_batch(
    gen: Sequence[np.ndarray], mpr: Sequence[np.ndarray], num_devices: int
) -> StepTables:
    """Batched variant: gen[i] is (B, n_ctx, n_out), mpr[n] is (B, n+2)."""
    return StepTables(
        gen_cdf=tuple(_row_cdf(t) for t in gen),
        mpr_cdf=padded_mpr_cdf(mpr, num_devices),
    )


def sample_generation_batch(
    g: np.ndarray, step_tables: StepTables, config: SystemConfig, rng: np.random.Generator
) -> np.ndarray:
    out = np.zeros_like(g)
    for i, members in enumerate(config.clusters):
        ctx = pattern_index(g, members)
        nxt = _sample_rows(step_tables.gen_cdf[i], ctx, rng)
        out[:, list(members)] = pattern_bits(nxt, len(members))
    return out


def sample_delivery_batch(
    actions: np.ndarray, step_tables: StepTables, rng: np.random.Generator
) -> np.ndarray:
    b, k = actions.shape
    n_tx = actions.sum(axis=1).astype(np.int64)
    n_rx = _sample_rows(step_tables.mpr_cdf, n_tx, rng)
    # Uniform subset of the transmitters: rank a fresh uniform score per
    # device (non-transmitters pushed last) and deliver to the n_rx smallest.
    scores = rng.random((b, k))
    scores = np.where(actions == 1, scores, 2.0)
    order = np.argsort(scores, axis=1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(k), (b, k)).copy(), axis=1)
    return ((ranks < n_rx[:, None]) & (actions == 1)).astype(actions.dtype)


def buffer_update_batch(
    q: np.ndarray, g_next: np.ndarray, d_next: np.ndarray, q_max: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    q_next = np.minimum(q_max, q + g_next - d_next)
    overflow = (q == q_max) & (g_next == 1) & (d_next == 0)
    return q_next, overflow


def reward_batch(
    q: np.ndarray, g_next: np.ndarray, d_next: np.ndarray, config: SystemConfig
) -> np.ndarray:
    overflow = (q == config.q_max) & (g_next == 1) & (d_next == 0)
    per_device = np.where(d_next == 1, config.xi, np.where(overflow, -config.xi, -1.0))
    return (config.beta * per_device).sum(axis=-1)


def step_batch(
    q: np.ndarray,
    g: np.ndarray,
    d: np.ndarray,
    actions: np.ndarray,
    step_tables: StepTables,
    config: SystemConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One slot for a batch of episodes; returns (q', g', d', reward, overflow)."""
    g_next = sample_generation_batch(g, step_tables, config, rng)
    d_next = sample_delivery_batch(actions, step_tables, rng)
    q_next, overflow = buffer_update_batch(q, g_next, d_next, config.q_max)
    rew = reward_batch(q, g_next, d_next, config)
    return q_next, g_next, d_next, rew, overflow


def initial_state_batch(
    tables: DynamicsTables, config: SystemConfig, batch: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Empty buffers, no pending ACKs, arrivals from each cluster chain's stationary law."""
    k = config.num_devices
    q = np.zeros((batch, k), dtype=np.int64)
    g = np.zeros((batch, k), dtype=np.int64)
    d = np.zeros((batch, k), dtype=np.int64)
    for i, members in enumerate(config.clusters):
        table = tables.gen[i]
        pi = stationary_distribution(table)
        if pi.ndim == 1:
            cdf = np.broadcast_to(_row_cdf(pi[None, :])[0], (batch, pi.shape[-1]))
        else:  # per-episode tables
            cdf = _row_cdf(pi)
        u = rng.random(batch)
        idx = (cdf <= u[:, None]).sum(axis=1)
        g[:, list(members)] = pattern_bits(idx, len(members))
    return q, g, d


# ---------------------------------------------------------------------------
# Single-transition operations


def _check_action(state: SystemState, action: np.ndarray) -> np.ndarray:
    action = np.asarray(action, dtype=np.int64)
    if action.shape != state.q.shape:
        raise ValueError(f"action shape {action.shape} does not match device count")
    if np.any((action != 0) & (action != 1)):
        raise ValueError("action entries must be 0 or 1")
    if np.any(action > state.q):
        raise ValueError("cannot transmit from an empty buffer (a^k > q^k)")
    return action


def sample_generation(
    cluster_pattern: int, table: np.ndarray, rng: np.random.Generator
) -> int:
    """Next cluster bit pattern drawn from the row indexed by the current one."""
    table = np.asarray(table, dtype=float)
    if not 0 <= cluster_pattern < table.shape[0]:
        raise ConfigError(f"pattern index {cluster_pattern} outside table with {table.shape[0]} rows")
    cdf = _row_cdf(table[None, cluster_pattern])[0]
    return int((cdf <= rng.random()).sum())


def mpr_distribution(action: np.ndarray, config: SystemConfig) -> dict[tuple[int, ...], float]:
    """Exact delivery-vector distribution for a joint action.

    With n transmitters, a decoded count n_rx is drawn from the channel row
    and every size-n_rx subset of the transmitters is equally likely.
    """
    return _mpr_distribution_tables(action, config.tables)


def _mpr_distribution_tables(
    action: np.ndarray, tables: DynamicsTables
) -> dict[tuple[int, ...], float]:
    from itertools import combinations

    action = np.asarray(action, dtype=np.int64)
    k = action.shape[0]
    transmitters = [i for i in range(k) if action[i] == 1]
    n_tx = len(transmitters)
    if n_tx == 0:
        return {tuple([0] * k): 1.0}
    row = tables.mpr[n_tx - 1]
    dist: dict[tuple[int, ...], float] = {}
    for n_rx, p in enumerate(row):
        if p == 0.0:
            continue
        share = float(p) / comb(n_tx, n_rx)
        for subset in combinations(transmitters, n_rx):
            d = [0] * k
            for dev in subset:
                d[dev] = 1
            dist[tuple(d)] = dist.get(tuple(d), 0.0) + share
    return dist


def sample_delivery(
    action: np.ndarray, config: SystemConfig, rng: np.random.Generator
) -> np.ndarray:
    action = np.asarray(action, dtype=np.int64)
    st = prepare_tables(config.tables, config.num_devices)
    return sample_delivery_batch(action[None, :], st, rng)[0]


def buffer_update(q: int, g_next: int, d_next: int, q_max: int) -> tuple[int, int]:
    if not 0 <= q <= q_max:
        raise ValueError(f"buffer occupancy {q} outside [0, {q_max}]")
    q_arr, over = buffer_update_batch(
        np.array([q]), np.array([g_next]), np.array([d_next]), np.array([q_max])
    )
    return int(q_arr[0]), int(over[0])


def reward(
    state: SystemState, action: np.ndarray, next_state: SystemState, config: SystemConfig
) -> float:
    del action  # the reward depends on the transition only through the states
    return float(reward_batch(state.q[None], next_state.g[None], next_state.d[None], config)[0])


def step_ground_truth(
    state: SystemState, action: np.ndarray, config: SystemConfig, rng: np.random.Generator
) -> StepOutcome:
    return step_with_tables(state, action, config.tables, config, rng)


def step_with_tables(
    state: SystemState,
    action: np.ndarray,
    tables: DynamicsTables,
    config: SystemConfig,
    rng: np.random.Generator,
) -> StepOutcome:
    action = _check_action(state, action)
    st = prepare_tables(tables, config.num_devices)
    q2, g2, d2, rew, over = step_batch(
        state.q[None], state.g[None], state.d[None], action[None], st, config, rng
    )
    return StepOutcome(
        next_state=SystemState(q=q2[0], g=g2[0], d=d2[0]),
        reward=float(rew[0]),
        delivered=d2[0].copy(),
        overflow=over[0].astype(np.int64),
    )


def transition_probability(
    state: SystemState, action: np.ndarray, next_state: SystemState, config: SystemConfig
) -> float:
    return transition_probability_tables(state, action, next_state, config.tables, config)


def transition_probability_tables(
    state: SystemState,
    action: np.ndarray,
    next_state: SystemState,
    tables: DynamicsTables,
    config: SystemConfig,
) -> float:
    """Exact factored transition probability; 0 for buffer-inconsistent targets."""
    action = np.asarray(action, dtype=np.int64)
    q_implied = np.minimum(config.q_max, state.q + next_state.g - next_state.d)
    if np.any(q_implied != next_state.q):
        return 0.0
    prob = 1.0
    for i, members in enumerate(config.clusters):
        ctx = int(pattern_index(state.g, members))
        nxt = int(pattern_index(next_state.g, members))
        prob *= float(tables.gen[i][ctx, nxt])
    prob *= _delivery_probability(action, next_state.d, tables)
    return prob


def _delivery_probability(
    action: np.ndarray, delivered: np.ndarray, tables: DynamicsTables
) -> float:
    n_tx = int(action.sum())
    if np.any(delivered > action):
        return 0.0
    if n_tx == 0:
        return 1.0  # delivered is all-zero here since d <= a
    n_rx = int(delivered.sum())
    return float(tables.mpr[n_tx - 1][n_rx]) / comb(n_tx, n_rx)


def initial_state(
    config: SystemConfig, rng: np.random.Generator, tables: DynamicsTables | None = None
) -> SystemState:
    tables = config.tables if tables is None else tables
    q, g, d = initial_state_batch(tables, config, 1, rng)
    return SystemState(q=q[0], g=g[0], d=d[0])


# ---------------------------------------------------------------------------
# Trajectory container and its line-delimited serialization


@dataclass(frozen=True)
class Trajectory:
    """T transitions stored as T+1 joint states plus per-slot actions/rewards."""

    q: np.ndarray  # (T+1, K)
    g: np.ndarray  # (T+1, K)
    d: np.ndarray  # (T+1, K)
    actions: np.ndarray  # (T, K)
    rewards: np.ndarray  # (T,)

    @property
    def num_transitions(self) -> int:
        return self.actions.shape[0]

    def state(self, t: int) -> SystemState:
        return SystemState(q=self.q[t], g=self.g[t], d=self.d[t])

    def records(self) -> list[TransitionRecord]:
        return [
            TransitionRecord(self.state(t), self.actions[t].copy(), self.state(t + 1))
            for t in range(self.num_transitions)
        ]


def write_trajectory(path: str | Path, traj: Trajectory) -> None:
    """One line per slot: t, q[1..K], g[1..K], d[1..K], a[1..K], reward.

    The final line carries the terminal state with zero action and reward.
    """
    k = traj.q.shape[1]
    header = (
        ["t"]
        + [f"q{i+1}" for i in range(k)]
        + [f"g{i+1}" for i in range(k)]
        + [f"d{i+1}" for i in range(k)]
        + [f"a{i+1}" for i in range(k)]
        + ["reward"]
    )
    lines = [",".join(header)]
    n = traj.num_transitions
    for t in range(n + 1):
        a = traj.actions[t] if t < n else np.zeros(k, dtype=np.int64)
        r = traj.rewards[t] if t < n else 0.0
        fields = (
            [str(t)]
            + [str(int(x)) for x in traj.q[t]]
            + [str(int(x)) for x in traj.g[t]]
            + [str(int(x)) for x in traj.d[t]]
            + [str(int(x)) for x in a]
            + [repr(float(r))]
        )
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> Trajectory:
    text = Path(path).read_text().strip().splitlines()
    if not text:
        raise ValueError(f"{path}: empty trajectory file")
    header = text[0].split(",")
    k = sum(1 for h in header if h.startswith("q"))
    rows = [line.split(",") for line in text[1:]]
    if not rows:
        return Trajectory(
            q=np.zeros((0, k), dtype=np.int64),
            g=np.zeros((0, k), dtype=np.int64),
            d=np.zeros((0, k), dtype=np.int64),
            actions=np.zeros((0, k), dtype=np.int64),
            rewards=np.zeros(0),
        )
    data = np.array([[float(x) for x in row] for row in rows])
    q = data[:, 1 : 1 + k].astype(np.int64)
    g = data[:, 1 + k : 1 + 2 * k].astype(np.int64)
    d = data[:, 1 + 2 * k : 1 + 3 * k].astype(np.int64)
    a = data[:, 1 + 3 * k : 1 + 4 * k].astype(np.int64)
    r = data[:, 1 + 4 * k]
    return Trajectory(q=q, g=g, d=d, actions=a[:-1], rewards=r[:-1])


def records_from_arrays(
    q: np.ndarray, g: np.ndarray, d: np.ndarray, actions: np.ndarray
) -> list[TransitionRecord]:
    """Chained records from (T+1, K) state arrays and (T, K) actions."""
    out = []
    for t in range(actions.shape[0]):
        out.append(
            TransitionRecord(
                SystemState(q=q[t], g=g[t], d=d[t]),
                actions[t],
                SystemState(q=q[t + 1], g=g[t + 1], d=d[t + 1]),
            )
        )
    return out
