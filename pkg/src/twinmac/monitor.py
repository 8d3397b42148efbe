"""Anomaly monitoring: data log-likelihood under sampled models, the
epistemic disagreement (variance) test, the point-estimate likelihood
benchmark, and ROC evaluation.

Log-likelihoods of impossible events are -inf; before a variance is formed
they are floored at LL_FLOOR and any floored sample forces the ceiling
score, since an event with probability zero under every sampled model is an
unambiguous anomaly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import env, model
from .config import SystemConfig
from .env import TransitionRecord
from .model import ModelSample, PosteriorModel

LL_FLOOR = -1e6
VARIANCE_CEILING = 1e12  # dominates any variance of floored log-likelihoods
NEGLL_CEILING = 1e6


@dataclass(frozen=True)
class AnomalyScore:
    value: float
    kind: str  # "bayesian-variance" or "frequentist-negll"


def _policy_log_prob(policy, rec: TransitionRecord, t: int) -> float:
    """log prod_k pi^k(a^k | o^k) for a per-device factorized policy."""
    p_tx = policy.transmit_probs(rec.state.q[None], rec.state.g[None], rec.state.d[None], t)[0]
    action = np.asarray(rec.action)
    probs = np.where(action == 1, p_tx, 1.0 - p_tx)
    if np.any(probs <= 0.0):
        return -np.inf
    return float(np.log(probs).sum())


def log_likelihood(
    theta: ModelSample,
    records: Sequence[TransitionRecord],
    policy,
    config: SystemConfig,
    include_policy: bool = True,
) -> float:
    """Sum over the window of log(T_theta(s'|s,a) * pi(a|s)); -inf if any factor is 0.

    The policy factor does not depend on theta, so callers that only compare
    models (the disagreement variance) may pass include_policy=False; the
    variance is identical either way.
    """
    total = 0.0
    for t, rec in enumerate(records):
        prob = model.model_transition_probability(theta, rec.state, rec.action, rec.next_state, config)
        if prob <= 0.0:
            return -np.inf
        total += np.log(prob)
        if include_policy and policy is not None:
            lp = _policy_log_prob(policy, rec, t)
            if lp == -np.inf:
                return -np.inf
            total += lp
    return float(total)


def cluster_transition_counts(
    records: Sequence[TransitionRecord], members: Sequence[int], n_patterns: int
) -> np.ndarray:
    """(n_patterns, n_patterns) counts of observed cluster pattern transitions."""
    counts = np.zeros((n_patterns, n_patterns), dtype=np.int64)
    for rec in records:
        ctx = int(env.pattern_index(rec.state.g, members))
        nxt = int(env.pattern_index(rec.next_state.g, members))
        counts[ctx, nxt] += 1
    return counts


def _ll_from_counts(log_rows: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """counts-weighted sum of log probabilities; log_rows is (..., n_ctx, n_out)."""
    flat_counts = counts.reshape(-1).astype(float)
    sel = flat_counts > 0
    logs = log_rows.reshape(log_rows.shape[:-2] + (-1,))[..., sel]
    return logs @ flat_counts[sel]


def cluster_log_likelihood(
    theta: ModelSample,
    records: Sequence[TransitionRecord],
    cluster: int,
    config: SystemConfig,
) -> float:
    """Generation-factor log-likelihood of one cluster only; no channel or policy terms."""
    members = config.clusters[cluster]
    table = theta.gen[cluster]
    counts = cluster_transition_counts(records, members, table.shape[0])
    with np.errstate(divide="ignore"):
        val = _ll_from_counts(np.log(table), counts)
    return float(val) if counts.sum() else 0.0


def disagreement_score(
    posterior: PosteriorModel,
    records: Sequence[TransitionRecord],
    num_samples: int,
    ll_kind: str,
    rng: np.random.Generator,
    config: SystemConfig,
    cluster: int = 0,
) -> AnomalyScore:
    """Sample variance of the window log-likelihood across posterior draws."""
    if num_samples < 2:
        raise ValueError("num_samples must be >= 2")
    if ll_kind == "cluster":
        members = config.clusters[cluster]
        table = posterior.gen[cluster]
        counts = cluster_transition_counts(records, members, table.num_contexts)
        rows = np.stack(table.sample_rows(rng, size=num_samples), axis=1)
        with np.errstate(divide="ignore"):
            lls = _ll_from_counts(np.log(rows), counts)
        if not counts.sum():
            lls = np.zeros(num_samples)
    elif ll_kind == "full":
        lls = np.array([
            log_likelihood(model.sample_model(posterior, rng), records, None, config,
                           include_policy=False)
            for _ in range(num_samples)
        ])
    else:
        raise ValueError(f"unknown ll_kind {ll_kind!r}")

    floored = lls <= LL_FLOOR
    if floored.any():
        return AnomalyScore(value=VARIANCE_CEILING, kind="bayesian-variance")
    return AnomalyScore(value=float(np.var(lls, ddof=1)), kind="bayesian-variance")


def frequentist_score(
    theta_map: ModelSample,
    records: Sequence[TransitionRecord],
    cluster: int,
    config: SystemConfig,
) -> AnomalyScore:
    """Negated cluster log-likelihood at the point estimate (larger = more anomalous)."""
    ll = cluster_log_likelihood(theta_map, records, cluster, config)
    return AnomalyScore(value=float(min(-ll, NEGLL_CEILING)), kind="frequentist-negll")


# ---------------------------------------------------------------------------
# ROC machinery


def roc_curve(
    scores_nominal: Sequence[float], scores_anomalous: Sequence[float]
) -> tuple[list[tuple[float, float, float]], float]:
    """Threshold sweep (score >= threshold flags an anomaly).

    Returns ([(threshold, fpr, tpr), ...] sorted by increasing fpr, auc).
    """
    nominal = np.asarray(scores_nominal, dtype=float)
    anomalous = np.asarray(scores_anomalous, dtype=float)
    if nominal.size == 0 or anomalous.size == 0:
        raise ValueError("both score lists must be nonempty")
    thresholds = np.concatenate(([np.inf], np.unique(np.concatenate([nominal, anomalous]))[::-1]))
    points = []
    for thr in thresholds:
        fpr = float((nominal >= thr).mean())
        tpr = float((anomalous >= thr).mean())
        points.append((float(thr), fpr, tpr))
    points.sort(key=lambda p: (p[1], p[2]))
    fpr = np.array([p[1] for p in points])
    tpr = np.array([p[2] for p in points])
    auc = float(np.trapezoid(tpr, fpr))
    return points, auc


def tpr_at_fpr_grid(points: Sequence[tuple[float, float, float]], grid: np.ndarray) -> np.ndarray:
    """Step interpolation of a single ROC curve onto an FPR grid (best tpr with fpr <= f)."""
    fpr = np.array([p[1] for p in points])
    tpr = np.array([p[2] for p in points])
    out = np.zeros_like(grid)
    for i, f in enumerate(grid):
        sel = fpr <= f + 1e-12
        out[i] = tpr[sel].max() if sel.any() else 0.0
    return out


def average_roc(
    curves: Sequence[Sequence[tuple[float, float, float]]], grid_size: int = 201
) -> tuple[np.ndarray, np.ndarray]:
    """Vertical average of per-phase ROC curves: mean TPR on a shared FPR grid."""
    grid = np.linspace(0.0, 1.0, grid_size)
    stack = np.stack([tpr_at_fpr_grid(points, grid) for points in curves])
    return grid, stack.mean(axis=0)


def fpr_at_tpr(fpr_grid: np.ndarray, mean_tpr: np.ndarray, target: float) -> float:
    """Smallest FPR at which the averaged curve reaches the target TPR."""
    idx = int(np.searchsorted(mean_tpr >= target, True))
    if idx >= len(fpr_grid):
        return 1.0
    if idx == 0 or mean_tpr[idx] == mean_tpr[idx - 1]:
        return float(fpr_grid[idx])
    f0, f1 = fpr_grid[idx - 1], fpr_grid[idx]
    t0, t1 = mean_tpr[idx - 1], mean_tpr[idx]
    return float(f0 + (f1 - f0) * (target - t0) / (t1 - t0))
