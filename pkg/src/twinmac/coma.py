"""Counterfactual multi-agent policy optimization on virtual rollouts.

A centralized critic regresses lambda-returns of the batch; each agent's
advantage subtracts the critic's average over that agent's own actions
under its current policy. Rollouts come either from a fixed set of dynamics
tables (point model or ground truth) or from a posterior that is re-sampled
every `resample_period` episodes.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Sequence, Union

import numpy as np

from . import env, model
from .config import DynamicsTables, SystemConfig, TrainConfig
from .model import PosteriorModel
from .nets import Actor, Adam, Critic, FeatureCodec, entropy

ModelSource = Union[PosteriorModel, DynamicsTables]


class TrainingDiverged(RuntimeError):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class RolloutBatch:
    """Episodes stacked on the leading axis; states carry H+1 slots."""

    q: np.ndarray  # (B, H+1, K)
    g: np.ndarray
    d: np.ndarray
    p: np.ndarray  # (H,) slot-position inputs
    actions: np.ndarray  # (B, H, K)
    tx_probs: np.ndarray  # (B, H, K) transmit probabilities at recording time
    rewards: np.ndarray  # (B, H)
    overflow: np.ndarray  # (B, H, K)

    @property
    def num_episodes(self) -> int:
        return self.q.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def discounted_returns(self, gamma: float) -> np.ndarray:
        h = self.horizon
        return self.rewards @ (gamma ** np.arange(h))

    def throughput(self) -> float:
        return float(self.d[:, 1:, :].sum(axis=2).mean())

    def overflow_rate(self) -> float:
        return float(self.overflow.mean())


def _episode_tables(
    source: ModelSource, batch: int, period: float, rng: np.random.Generator
) -> DynamicsTables:
    """Tables used for stepping; batched per episode when sampling a posterior."""
    if isinstance(source, PosteriorModel):
        if np.isinf(period):
            groups = 1
        else:
            groups = ceil(batch / int(period))
        draw = model.sample_models_batch(source, groups, rng)
        if np.isinf(period):
            idx = np.zeros(batch, dtype=np.int64)
        else:
            idx = np.minimum(np.arange(batch) // int(period), groups - 1)
        return DynamicsTables(
            gen=tuple(t[idx] for t in draw.gen),
            mpr=tuple(r[idx] for r in draw.mpr),
        )
    return source


def generate_virtual_rollouts(
    source: ModelSource,
    actor: Actor,
    config: SystemConfig,
    train_config: TrainConfig,
    rng: np.random.Generator,
) -> RolloutBatch:
    b = train_config.episodes_per_iter
    h = train_config.horizon
    k = config.num_devices
    model_rng, traj_rng = rng.spawn(2)
    tables = _episode_tables(source, b, train_config.resample_period, model_rng)
    batched = tables.gen[0].ndim == 3
    if batched:
        step_tables = env.prepare_tables_batch(tables.gen, tables.mpr, k)
    else:
        step_tables = env.prepare_tables(tables, k)

    q = np.zeros((b, h + 1, k), dtype=np.int64)
    g = np.zeros_like(q)
    d = np.zeros_like(q)
    actions = np.zeros((b, h, k), dtype=np.int64)
    tx_probs = np.zeros((b, h, k))
    rewards = np.zeros((b, h))
    overflow = np.zeros((b, h, k), dtype=np.int64)
    positions = np.arange(h) % train_config.position_period

    q[:, 0], g[:, 0], d[:, 0] = env.initial_state_batch(tables, config, b, traj_rng)
    for t in range(h):
        probs = actor.transmit_probs(q[:, t], g[:, t], d[:, t], int(positions[t]))
        a = ((traj_rng.random((b, k)) < probs) & (q[:, t] >= 1)).astype(np.int64)
        q2, g2, d2, rew, over = env.step_batch(
            q[:, t], g[:, t], d[:, t], a, step_tables, config, traj_rng
        )
        q[:, t + 1], g[:, t + 1], d[:, t + 1] = q2, g2, d2
        actions[:, t] = a
        tx_probs[:, t] = probs
        rewards[:, t] = rew
        overflow[:, t] = over
    return RolloutBatch(
        q=q, g=g, d=d, p=positions, actions=actions,
        tx_probs=tx_probs, rewards=rewards, overflow=overflow,
    )


def counterfactual_advantage(
    action_values: np.ndarray, action_taken: int, policy_probs: np.ndarray
) -> float:
    """Chosen-action value minus its average over the agent's own policy."""
    action_values = np.asarray(action_values, dtype=float)
    policy_probs = np.asarray(policy_probs, dtype=float)
    return float(action_values[action_taken] - policy_probs @ action_values)


def critic_targets(
    batch: RolloutBatch,
    critic: Critic,
    train_config: TrainConfig,
    config: SystemConfig,
    rewards: np.ndarray | None = None,
) -> np.ndarray:
    """(B, H) lambda-returns, bootstrapping 0 past the horizon.

    Bootstrap values use the first agent's critic view of (s, a); every
    agent's view regresses to the same joint value, so one view suffices.
    """
    b, h = batch.rewards.shape
    k = batch.q.shape[2]
    r = batch.rewards if rewards is None else rewards
    lam = train_config.td_lambda
    gamma = config.gamma

    boot = np.zeros((b, h + 1))
    if lam < 1.0 and h > 1:
        flat = lambda arr: arr[:, 1:h].reshape(b * (h - 1), k)
        x = critic.codec.encode_critic(
            flat(batch.q), flat(batch.g), flat(batch.d), flat(batch.actions), agent=0
        )
        values, _ = critic.mlp.forward(x)  # (B*(H-1), 2)
        a0 = flat(batch.actions)[:, 0]
        chosen = values[np.arange(values.shape[0]), a0]
        boot[:, 1:h] = chosen.reshape(b, h - 1)

    targets = np.zeros((b, h + 1))
    for t in range(h - 1, -1, -1):
        targets[:, t] = r[:, t] + gamma * (
            (1.0 - lam) * boot[:, t + 1] + lam * targets[:, t + 1]
        )
    return targets[:, :h]


def _critic_io(batch: RolloutBatch, codec: FeatureCodec) -> tuple[np.ndarray, np.ndarray]:
    """Flattened critic inputs for all (episode, step, agent) triples."""
    b, h = batch.rewards.shape
    k = batch.q.shape[2]
    flat = lambda arr: arr[:, :h].reshape(b * h, k)
    x = codec.encode_critic_all(
        flat(batch.q), flat(batch.g), flat(batch.d), flat(batch.actions)
    )  # (B*H, K, Dc)
    return x.reshape(b * h * k, -1), batch.actions.reshape(b * h * k)


def _actor_inputs(batch: RolloutBatch, codec: FeatureCodec) -> np.ndarray:
    b, h = batch.rewards.shape
    k = batch.q.shape[2]
    blocks = []
    for t in range(h):
        blocks.append(codec.encode_actor(batch.q[:, t], batch.g[:, t], batch.d[:, t],
                                         int(batch.p[t])))
    return np.stack(blocks, axis=1).reshape(b * h * k, -1)


@dataclass
class TrainResult:
    actor: Actor
    critic: Critic
    curve: list[dict]


def train(
    source: ModelSource,
    config: SystemConfig,
    train_config: TrainConfig,
    rng: np.random.Generator,
    warm_start: "TrainResult | None" = None,
) -> TrainResult:
    tc = train_config
    codec = FeatureCodec.for_config(config, tc.position_period)
    dtype = np.dtype(tc.net_dtype)
    actor = Actor(codec, tc.actor_hidden, rng, dtype=dtype)
    critic = Critic(codec, tc.critic_hidden, rng, dtype=dtype)
    if warm_start is not None:
        for dst, src in ((actor.mlp, warm_start.actor.mlp), (critic.mlp, warm_start.critic.mlp)):
            for w, b, w0, b0 in zip(dst.weights, dst.biases, src.weights, src.biases):
                w[...] = w0
                b[...] = b0
    opt_actor = Adam(actor.mlp.params(), lr=tc.actor_lr)
    opt_critic = Adam(critic.mlp.params(), lr=tc.critic_lr)
    scale = tc.reward_scale if tc.reward_scale is not None else 1.0 / config.xi

    curve: list[dict] = []
    best = -np.inf
    stale = 0
    for it in range(tc.iterations):
        batch = generate_virtual_rollouts(source, actor, config, tc, rng)
        b, h = batch.rewards.shape
        k = batch.q.shape[2]
        n = b * h * k

        scaled_r = batch.rewards * scale
        targets = critic_targets(batch, critic, tc, config, rewards=scaled_r)
        y = np.repeat(targets.reshape(b * h), k).astype(dtype)
        x_critic, a_flat = _critic_io(batch, codec)

        mb = b * h
        for _ in range(tc.critic_steps):
            idx = rng.integers(0, n, size=mb)
            out, cache = critic.mlp.forward(x_critic[idx])
            pred = out[np.arange(mb), a_flat[idx]]
            err = pred - y[idx]
            critic_loss = float(np.mean(err * err))
            if not np.isfinite(critic_loss):
                raise TrainingDiverged(f"non-finite critic loss at iteration {it}")
            d_out = np.zeros_like(out)
            d_out[np.arange(mb), a_flat[idx]] = 2.0 * err / mb
            grads, _ = critic.mlp.backward(cache, d_out)
            opt_critic.step(critic.mlp.params(), grads)

        # Advantages from the freshly updated critic; the baseline marginalizes
        # each agent's own action under its recorded policy.
        values, _ = critic.mlp.forward(x_critic)
        probs_rec = np.stack([1.0 - batch.tx_probs, batch.tx_probs], axis=-1).reshape(n, 2)
        chosen_q = values[np.arange(n), a_flat]
        adv = (chosen_q - (probs_rec * values).sum(axis=1)).astype(dtype)

        x_actor = _actor_inputs(batch, codec)
        logits, cache = actor.mlp.forward(x_actor)
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        masked = (batch.q[:, :h].reshape(n) == 0)
        ent_w = tc.entropy_weight * max(0.0, 1.0 - it / max(1, tc.iterations - 1))

        one_hot = np.zeros((n, 2), dtype=dtype)
        one_hot[np.arange(n), a_flat] = 1.0
        log_probs = np.log(probs)
        ent = -(probs * log_probs).sum(axis=1)
        actor_loss = float(
            -(adv * log_probs[np.arange(n), a_flat])[~masked].sum() / n
            - ent_w * ent[~masked].sum() / n
        )
        if not np.isfinite(actor_loss):
            raise TrainingDiverged(f"non-finite actor loss at iteration {it}")
        d_logits = (adv[:, None] * (probs - one_hot)) / n
        d_logits += (ent_w / n) * probs * (log_probs + ent[:, None])
        d_logits[masked] = 0.0
        grads, _ = actor.mlp.backward(cache, d_logits)
        opt_actor.step(actor.mlp.params(), grads)

        mean_return = float(batch.discounted_returns(config.gamma).mean())
        curve.append({
            "iteration": it,
            "return": mean_return,
            "throughput": batch.throughput(),
            "overflow_rate": batch.overflow_rate(),
            "entropy": float(entropy(np.stack(
                [1.0 - batch.tx_probs, batch.tx_probs], axis=-1)).mean()),
        })

        if (it + 1) % tc.eval_every == 0:
            recent = float(np.mean([row["return"] for row in curve[-tc.eval_every:]]))
            if not np.isfinite(best) or recent > best + tc.plateau_tol * max(1.0, abs(best)):
                best = recent
                stale = 0
            else:
                stale += 1
                if stale >= tc.plateau_patience:
                    break
    return TrainResult(actor=actor, critic=critic, curve=curve)
