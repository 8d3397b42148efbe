"""Small feedforward networks with hand-written reverse-mode gradients.

All math is float64 numpy so gradients can be checked against central
finite differences tightly. The actor is one shared network taking a
device-id feature; the critic scores both of one agent's actions with the
rest of the joint action held fixed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import SystemConfig
from .env import DeviceObservation, SystemState


class GradientError(FloatingPointError):
    """Non-finite values encountered during backpropagation."""


def xavier_limit(fan_in: int, fan_out: int) -> float:
    return np.sqrt(6.0 / (fan_in + fan_out))


class MLP:
    """tanh hidden layers, linear output; forward returns a cache for backward.

    float64 by default so gradients check against finite differences tightly;
    training may use float32 for speed.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, dtype=np.float64):
        self.sizes = tuple(int(s) for s in sizes)
        self.dtype = np.dtype(dtype)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            lim = xavier_limit(fan_in, fan_out)
            self.weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        cache = []
        h = np.asarray(x, dtype=self.dtype)
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if layer < self.num_layers - 1:
                out = np.tanh(z)
            else:
                out = z
            cache.append((h, out if layer < self.num_layers - 1 else None))
            h = out
        return h, cache

    def backward(self, cache: list, d_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Exact gradient of a scalar loss given d loss / d output.

        Returns (grads, d_input) with grads ordered [dW0, db0, dW1, db1, ...].
        """
        grads: list[np.ndarray] = []
        grad = d_out
        for layer in range(self.num_layers - 1, -1, -1):
            inp, act = cache[layer]
            if act is not None:  # undo the tanh of this hidden layer
                grad = grad * (1.0 - act * act)
            dw = inp.T @ grad
            db = grad.sum(axis=0)
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                raise GradientError(f"non-finite gradient at layer {layer}")
            grads.append(db)
            grads.append(dw)
            grad = grad @ self.weights[layer].T
        grads.reverse()
        return grads, grad

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


class Adam:
    """Standard Adam; a zero gradient leaves the parameters bit-identical."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


# ---------------------------------------------------------------------------
# Feature encoding


@dataclass(frozen=True)
class FeatureCodec:
    """Deterministic encoding of observations/states into network inputs."""

    num_devices: int
    q_onehot: int  # max buffer capacity + 1
    position_period: int

    @classmethod
    def for_config(cls, config: SystemConfig, position_period: int) -> "FeatureCodec":
        return cls(
            num_devices=config.num_devices,
            q_onehot=int(config.q_max.max()) + 1,
            position_period=position_period,
        )

    @property
    def actor_dim(self) -> int:
        return self.q_onehot + 2 + self.position_period + self.num_devices

    @property
    def critic_dim(self) -> int:
        k = self.num_devices
        return k * (self.q_onehot + 2) + k + k

    def _device_block(self, q: np.ndarray, g: np.ndarray, d: np.ndarray) -> np.ndarray:
        """(B, K) state arrays -> (B, K, q_onehot + 2) per-device features."""
        b, k = q.shape
        block = np.zeros((b, k, self.q_onehot + 2))
        idx = np.clip(q, 0, self.q_onehot - 1)
        np.put_along_axis(block, idx[..., None], 1.0, axis=2)
        block[..., self.q_onehot] = g
        block[..., self.q_onehot + 1] = d
        return block

    def encode_actor(self, q: np.ndarray, g: np.ndarray, d: np.ndarray, p: int) -> np.ndarray:
        """-> (B, K, actor_dim); p is the shared slot-position input."""
        b, k = q.shape
        block = self._device_block(q, g, d)
        pos = np.zeros((b, k, self.position_period))
        pos[..., int(p) % self.position_period] = 1.0
        ident = np.zeros((b, k, k))
        ident[:, np.arange(k), np.arange(k)] = 1.0
        return np.concatenate([block, pos, ident], axis=2)

    def encode_critic_all(
        self, q: np.ndarray, g: np.ndarray, d: np.ndarray, actions: np.ndarray
    ) -> np.ndarray:
        """-> (B, K, critic_dim): one row per agent with its own action slot zeroed."""
        b, k = q.shape
        state = self._device_block(q, g, d).reshape(b, 1, -1)
        state = np.broadcast_to(state, (b, k, state.shape[-1]))
        others = np.broadcast_to(actions.astype(float)[:, None, :], (b, k, k)).copy()
        others[:, np.arange(k), np.arange(k)] = 0.0
        ident = np.zeros((b, k, k))
        ident[:, np.arange(k), np.arange(k)] = 1.0
        return np.concatenate([state, others, ident], axis=2)

    def encode_critic(
        self, q: np.ndarray, g: np.ndarray, d: np.ndarray, actions: np.ndarray, agent: int
    ) -> np.ndarray:
        return self.encode_critic_all(q, g, d, actions)[:, agent, :]


# ---------------------------------------------------------------------------
# Actor and critic


class Actor:
    """Shared transmit policy over all devices, masked so an empty buffer
    can never transmit."""

    def __init__(self, codec: FeatureCodec, hidden: Sequence[int], rng: np.random.Generator,
                 dtype=np.float64):
        self.codec = codec
        self.mlp = MLP((codec.actor_dim, *hidden, 2), rng, dtype=dtype)

    def forward_probs(
        self, q: np.ndarray, g: np.ndarray, d: np.ndarray, p: int
    ) -> tuple[np.ndarray, list, np.ndarray]:
        """-> (probs (B,K,2), mlp cache, masked (B,K) bool)."""
        b, k = q.shape
        x = self.codec.encode_actor(q, g, d, p).reshape(b * k, -1)
        logits, cache = self.mlp.forward(x)
        probs = softmax(logits).reshape(b, k, 2)
        masked = q == 0
        probs[masked] = (1.0, 0.0)
        return probs, cache, masked

    def transmit_probs(
        self, q: np.ndarray, g: np.ndarray, d: np.ndarray, p: int,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        del rng  # deterministic policy; part of the shared policy interface
        probs, _, _ = self.forward_probs(q, g, d, p)
        return probs[..., 1]

    def action_distribution(self, obs: DeviceObservation, p: int, agent: int) -> np.ndarray:
        """Distribution over {idle, transmit} for one device observation."""
        k = self.codec.num_devices
        q = np.zeros((1, k), dtype=np.int64)
        g = np.zeros((1, k), dtype=np.int64)
        d = np.zeros((1, k), dtype=np.int64)
        q[0, agent], g[0, agent], d[0, agent] = obs.q, obs.g, obs.d
        probs, _, _ = self.forward_probs(q, g, d, p)
        return probs[0, agent]

    def backward_from_dlogits(self, cache: list, d_logits: np.ndarray) -> list[np.ndarray]:
        grads, _ = self.mlp.backward(cache, d_logits)
        return grads


class Critic:
    """Centralized action-value network with per-action outputs for one agent."""

    def __init__(self, codec: FeatureCodec, hidden: Sequence[int], rng: np.random.Generator,
                 dtype=np.float64):
        self.codec = codec
        self.mlp = MLP((codec.critic_dim, *hidden, 2), rng, dtype=dtype)

    def values_all(
        self, q: np.ndarray, g: np.ndarray, d: np.ndarray, actions: np.ndarray
    ) -> np.ndarray:
        """-> (B, K, 2): Q of each agent idling/transmitting, others fixed."""
        b, k = q.shape
        x = self.codec.encode_critic_all(q, g, d, actions).reshape(b * k, -1)
        out, _ = self.mlp.forward(x)
        return out.reshape(b, k, 2)

    def action_values(self, state: SystemState, other_actions: np.ndarray, agent: int) -> np.ndarray:
        x = self.codec.encode_critic(
            state.q[None], state.g[None], state.d[None],
            np.asarray(other_actions)[None], agent,
        )
        out, _ = self.mlp.forward(x)
        return out[0]


def policy_forward(actor: Actor, obs: DeviceObservation, p: int, agent: int) -> np.ndarray:
    return actor.action_distribution(obs, p, agent)


def critic_forward(
    critic: Critic, state: SystemState, other_actions: np.ndarray, agent: int
) -> np.ndarray:
    return critic.action_values(state, other_actions, agent)


# ---------------------------------------------------------------------------
# Flat-parameter views (finite-difference checks) and checkpoints


def get_flat(params: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def set_flat(params: Sequence[np.ndarray], flat: np.ndarray) -> None:
    offset = 0
    for p in params:
        p[...] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size


def save_policy(path: str | Path, actor: Actor, critic: Critic | None = None) -> None:
    """Text tensor format: a meta line then one shape-headed block per tensor."""
    lines = ["twinmac-params v1"]
    meta = {
        "num_devices": actor.codec.num_devices,
        "q_onehot": actor.codec.q_onehot,
        "position_period": actor.codec.position_period,
        "actor_sizes": list(actor.mlp.sizes),
        "critic_sizes": list(critic.mlp.sizes) if critic is not None else None,
        "dtype": actor.mlp.dtype.name,
    }
    lines.append("meta " + json.dumps(meta, sort_keys=True))

    def emit(prefix: str, mlp: MLP) -> None:
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            lines.append(f"tensor {prefix}.{i}.W {w.shape[0]} {w.shape[1]}")
            for row in w:
                lines.append(" ".join(repr(float(x)) for x in row))
            lines.append(f"tensor {prefix}.{i}.b 1 {b.shape[0]}")
            lines.append(" ".join(repr(float(x)) for x in b))

    emit("actor", actor.mlp)
    if critic is not None:
        emit("critic", critic.mlp)
    Path(path).write_text("\n".join(lines) + "\n")


def load_policy(path: str | Path) -> tuple[Actor, Critic | None]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "twinmac-params v1":
        raise ValueError(f"{path}: not a twinmac parameter file")
    meta = json.loads(lines[1].split(" ", 1)[1])
    codec = FeatureCodec(
        num_devices=meta["num_devices"],
        q_onehot=meta["q_onehot"],
        position_period=meta["position_period"],
    )
    tensors: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] != "tensor":
            raise ValueError(f"{path}: unexpected line {i + 1}")
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        block = np.array(
            [[float(x) for x in lines[i + 1 + r].split()] for r in range(rows)]
        ).reshape(rows, cols)
        tensors[name] = block
        i += 1 + rows
    rng = np.random.default_rng(0)  # immediately overwritten
    dtype = np.dtype(meta.get("dtype", "float64"))
    actor = Actor(codec, meta["actor_sizes"][1:-1], rng, dtype=dtype)
    for j in range(actor.mlp.num_layers):
        actor.mlp.weights[j][...] = tensors[f"actor.{j}.W"]
        actor.mlp.biases[j][...] = tensors[f"actor.{j}.b"][0]
    critic = None
    if meta.get("critic_sizes"):
        critic = Critic(codec, meta["critic_sizes"][1:-1], rng, dtype=dtype)
        for j in range(critic.mlp.num_layers):
            critic.mlp.weights[j][...] = tensors[f"critic.{j}.W"]
            critic.mlp.biases[j][...] = tensors[f"critic.{j}.b"][0]
    return actor, critic
