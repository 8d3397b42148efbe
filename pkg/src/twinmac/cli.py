"""Command line interface.

Subcommands: simulate, learn, train, evaluate, monitor, sweep, roc.
Every command is byte-reproducible given the same config and seed. Relative
--out paths are resolved against $TWINMAC_OUT_DIR when it is set.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import coma, harness, model, monitor, nets
from .config import Config, default_config_path, load_config, with_anomalous_generation
from .env import read_trajectory, write_trajectory


def _resolve_out(path: str) -> Path:
    out_dir = os.environ.get("TWINMAC_OUT_DIR")
    p = Path(path)
    if out_dir and not p.is_absolute():
        p = Path(out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list], comments: list[str] = ()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _policy_from_spec(spec: str, cfg: Config):
    if spec == "explore":
        return harness.ExplorationPolicy()
    if spec == "idle":
        return harness.AlwaysIdlePolicy()
    if spec == "transmit":
        return harness.AlwaysTransmitPolicy()
    if spec.startswith("p:"):
        return harness.PPersistentPolicy(float(spec[2:]))
    actor, _ = nets.load_policy(spec)
    return actor


def _cmd_simulate(args, cfg: Config) -> int:
    rng = harness.derive_rng(args.seed, 11)
    system = with_anomalous_generation(cfg) if args.anomalous else cfg.system
    policy = _policy_from_spec(args.policy, cfg)
    traj = harness.simulate_trajectory(policy, system, args.steps, rng)
    write_trajectory(_resolve_out(args.out), traj)
    return 0


def _cmd_learn(args, cfg: Config) -> int:
    if args.data is not None:
        records = read_trajectory(args.data).records()
    else:
        rng = harness.derive_rng(args.seed, 12)
        records = harness.collect_learning_data(cfg.system, args.steps, rng)
    alpha0 = cfg.learning.bayes_prior if args.mode == "bayesian" else cfg.learning.map_prior
    posterior = model.update_posterior(model.init_prior(cfg.system, alpha0), records)
    model.save_posterior(_resolve_out(args.out), posterior)
    return 0


def _cmd_train(args, cfg: Config) -> int:
    tc = cfg.training
    if args.mode == "oracle":
        source: coma.ModelSource = cfg.system.tables
        tc = replace(tc, iterations=tc.iterations * tc.oracle_iteration_multiplier)
    else:
        if args.posterior is None:
            raise ValueError(f"--posterior is required for mode {args.mode}")
        posterior = model.load_posterior(args.posterior)
        posterior.validate_for(cfg.system)
        source = posterior if args.mode == "bayesian" else model.map_estimate(posterior)
    rng = harness.derive_rng(args.seed, 13)
    result = coma.train(source, cfg.system, tc, rng)
    out = _resolve_out(args.out)
    nets.save_policy(out, result.actor, result.critic)
    metrics_path = _resolve_out(args.metrics) if args.metrics else out.with_suffix(".metrics.csv")
    _write_csv(
        metrics_path,
        ["iteration", "return", "throughput", "overflow_rate", "entropy"],
        [[r["iteration"], r["return"], r["throughput"], r["overflow_rate"], r["entropy"]]
         for r in result.curve],
    )
    return 0


def _cmd_evaluate(args, cfg: Config) -> int:
    rng = harness.derive_rng(args.seed, 14)
    policy = _policy_from_spec(args.policy, cfg)
    horizon = args.horizon or cfg.experiment.eval_horizon
    episodes = args.episodes or cfg.experiment.eval_episodes
    row = harness.evaluate_policy(policy, cfg.system, horizon, episodes, rng)
    _write_csv(
        _resolve_out(args.out),
        ["policy", "horizon", "episodes", "throughput", "overflow_prob", "discounted_return"],
        [[args.policy, horizon, episodes, row.throughput, row.overflow_prob,
          row.discounted_return]],
    )
    return 0


def _cmd_monitor(args, cfg: Config) -> int:
    posterior = model.load_posterior(args.posterior)
    posterior.validate_for(cfg.system)
    mon = cfg.monitoring
    rng = harness.derive_rng(args.seed, 15)
    rows = []
    for data_path in args.data:
        records = read_trajectory(data_path).records()
        if args.mode == "bayesian":
            score = monitor.disagreement_score(
                posterior, records, mon.num_model_samples, mon.ll_kind, rng,
                cfg.system, cluster=mon.cluster,
            )
        else:
            theta_map = model.map_estimate(posterior)
            score = monitor.frequentist_score(theta_map, records, mon.cluster, cfg.system)
        rows.append([data_path, score.kind, score.value])
    _write_csv(_resolve_out(args.out), ["data", "kind", "score"], rows)
    return 0


def _cmd_sweep(args, cfg: Config) -> int:
    exp = cfg.experiment
    if args.cycles:
        exp = replace(exp, cycles=args.cycles)
    if args.sizes:
        exp = replace(exp, learning_sizes=tuple(json.loads(args.sizes)))
    if args.modes:
        exp = replace(exp, modes=tuple(json.loads(args.modes)))
    cfg = replace(cfg, experiment=exp)
    rows = harness.experiment_policy_sweep(cfg, args.seed)
    _write_csv(
        _resolve_out(args.out),
        ["mode", "learning_steps", "cycle", "throughput", "overflow_prob", "discounted_return"],
        [[r.mode, r.learning_steps, r.cycle, r.throughput, r.overflow_prob,
          r.discounted_return] for r in rows],
        comments=[f"seed={args.seed}"],
    )
    return 0


def _cmd_roc(args, cfg: Config) -> int:
    exp = cfg.experiment
    if args.phases:
        exp = replace(exp, phases=args.phases)
    if args.windows:
        cfg = replace(cfg, monitoring=replace(cfg.monitoring, windows_per_class=args.windows))
    cfg = replace(cfg, experiment=exp)
    result = harness.experiment_anomaly_roc(cfg, args.seed)
    prefix = _resolve_out(args.out)
    meta = [f"seed={args.seed}", f"policy_learning_steps={result.policy_learning_steps}"]
    for det in ("bayesian", "frequentist"):
        rows = []
        for size in cfg.experiment.roc_sizes:
            res = result.detectors[(det, size)]
            for phase, points in enumerate(res.curves):
                rows.extend(
                    [size, phase, thr, fpr, tpr] for thr, fpr, tpr in points
                )
        _write_csv(
            Path(f"{prefix}_{det}.csv"),
            ["learning_steps", "phase", "threshold", "fpr", "tpr"],
            rows, comments=meta,
        )
    summary = []
    for size in cfg.experiment.roc_sizes:
        for det in ("bayesian", "frequentist"):
            res = result.detectors[(det, size)]
            summary.append([
                det, size, float(res.aucs.mean()), res.fpr_at_tpr(0.8),
                result.paired_wins(size),
            ])
    _write_csv(
        Path(f"{prefix}_summary.csv"),
        ["detector", "learning_steps", "mean_auc", "fpr_at_tpr80", "bayes_auc_wins"],
        summary, comments=meta,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twinmac",
        description="Simulate, learn, optimize and monitor a multi-device random-access network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="config file (default: shipped system)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output path")

    p = sub.add_parser("simulate", help="roll out a policy in the ground-truth system")
    common(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--policy", default="explore",
                   help="explore | idle | transmit | p:<prob> | <checkpoint path>")
    p.add_argument("--anomalous", action="store_true",
                   help="apply the configured anomalous generation law")

    p = sub.add_parser("learn", help="fit a posterior from exploration data")
    common(p)
    p.add_argument("--steps", type=int, default=20, help="exploration slots to simulate")
    p.add_argument("--data", default=None, help="use a recorded trajectory file instead")
    p.add_argument("--mode", choices=["bayesian", "frequentist"], default="bayesian")

    p = sub.add_parser("train", help="optimize transmission policies on a model")
    common(p)
    p.add_argument("--mode", choices=["bayesian", "frequentist", "oracle"], required=True)
    p.add_argument("--posterior", default=None, help="posterior artifact (non-oracle modes)")
    p.add_argument("--metrics", default=None, help="training metrics CSV path")

    p = sub.add_parser("evaluate", help="measure a policy in the ground-truth system")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("monitor", help="score monitoring windows for anomalies")
    common(p)
    p.add_argument("--posterior", required=True)
    p.add_argument("--mode", choices=["bayesian", "frequentist"], default="bayesian")
    p.add_argument("--data", nargs="+", required=True, help="window trajectory files")

    p = sub.add_parser("sweep", help="dataset-size sweep over all modes")
    common(p)
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--sizes", default=None, help="JSON list overriding learning sizes")
    p.add_argument("--modes", default=None, help="JSON list overriding modes")

    p = sub.add_parser("roc", help="anomaly-detection ROC experiment")
    common(p)
    p.add_argument("--phases", type=int, default=None)
    p.add_argument("--windows", type=int, default=None, help="windows per class per phase")
    return parser


_HANDLERS = {
    "simulate": _cmd_simulate,
    "learn": _cmd_learn,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "monitor": _cmd_monitor,
    "sweep": _cmd_sweep,
    "roc": _cmd_roc,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config) if args.config else load_config(default_config_path())
        return _HANDLERS[args.command](args, cfg)
    except Exception as exc:  # surface a diagnostic, nonzero exit
        print(f"twinmac {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
