"""``memo`` command line: train-expert | pretrain | transfer | analyze | curves."""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis
from .config import ExperimentConfig, Phase, parse_config
from .errors import (
    AggregationError, ConfigError, MemoError, MissingPrerequisite, TrainingDiverged, TypeMismatch,
    ValidationFailure,
)
from .imitation import Expert, train_il
from .policy import build_mlp_policy, build_modular_policy
from .ppo import train_ppo
from .envs import env_layout
from .transfer import TransferPlan, load_checkpoint, make_checkpoint, run_transfer, save_checkpoint

log = logging.getLogger("memo")

METRIC_COLUMNS = [
    "run_id", "phase", "step", "env_steps", "mean_reward", "reported_reward", "loss", "surrogate",
    "value_loss", "entropy", "clip_frac", "grad_norm", "lr", "iteration", "dataset_size",
    "L1_bc", "L2_inv", "Lp_product", "ratio", "validation_score", "wall_seconds",
]
CHECKPOINT_NAME = "policy.memockpt"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_PREREQ, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class MetricsWriter:
    """Append-only CSV sink with a fixed column set."""

    def __init__(self, path: Path, run_id: str, phase: Phase, deterministic: bool):
        self.path, self.run_id, self.phase, self.deterministic = path, run_id, phase, deterministic
        self._f = open(path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(METRIC_COLUMNS)
        self._step = 0
        self._t0 = time.perf_counter()

    def __call__(self, row: dict) -> None:
        row = dict(row)
        row["run_id"], row["phase"] = self.run_id, self.phase.value
        row["step"] = self._step
        self._step += 1
        row["wall_seconds"] = 0.0 if self.deterministic else time.perf_counter() - self._t0
        unknown = set(row) - set(METRIC_COLUMNS) - {"update", "epoch"}
        if unknown:
            raise KeyError(f"unexpected metric columns {sorted(unknown)}")
        self._w.writerow([_cell(row.get(c)) for c in METRIC_COLUMNS])
        self._f.flush()

    def close(self):
        self._f.close()


def resolve_path(pattern: str, seed: int, what: str) -> Path:
    """``{seed}`` is substituted and glob patterns must match exactly one file; directories mean their checkpoint."""
    text = pattern.replace("{seed}", str(seed))
    matches = sorted(glob.glob(text)) if any(c in text for c in "*?[") else [text]
    if len(matches) > 1:
        raise ConfigError(f"{what} pattern {text!r} matches {len(matches)} paths")
    path = Path(matches[0]) if matches else Path(text)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.is_file():
        raise MissingPrerequisite(f"{what} checkpoint {path} does not exist")
    return path


def _train_expert(cfg: ExperimentConfig, seed: int, run_dir: Path, sink, threads):
    env = cfg.env_config(seed)
    graph, partition, layout = env_layout(env)
    rng = np.random.default_rng([seed, 0])
    if cfg.policy_kind == "modular":
        policy = build_modular_policy(graph, partition, layout, cfg.arch, rng)
    else:
        policy = build_mlp_policy(layout, partition, cfg.arch, rng)
    result = train_ppo(policy, env, cfg.ppo, seed, callback=sink, threads=threads)
    save_checkpoint(make_checkpoint(policy, result.normalizer, env, result.critic, {"phase": cfg.phase.value,
                                                                                      "seed": seed}),
                    run_dir / CHECKPOINT_NAME)
    return {"final_reported_reward": result.metrics[-1]["reported_reward"] if result.metrics else math.nan}


def _pretrain(cfg: ExperimentConfig, seed: int, run_dir: Path, sink, threads):
    src = load_checkpoint(resolve_path(cfg.sections["il"]["expert"], seed, "expert"))
    env = cfg.env_config(seed)
    if (src.env["env_kind"], tuple(src.env["counts"])) != (env.env_kind.value, env.counts):
        raise TypeMismatch("expert checkpoint was trained on a different morphology")
    expert = Expert(src.build_policy(), src.normalizer)

    failure = None
    try:
        result = train_il(expert, env, cfg.il, seed, cfg.arch, callback=sink,
                          validate=cfg.sections["il"]["validate"])
    except ValidationFailure as exc:
        failure, result = exc, exc.result
    sink({"validation_score": result.validation_score})
    meta = {"phase": cfg.phase.value, "seed": seed, "loss_mode": cfg.sections["il"]["loss_mode"]}
    save_checkpoint(make_checkpoint(result.policy, expert.normalizer, env, None, meta), run_dir / CHECKPOINT_NAME)
    summary = {"validation_score": result.validation_score, "expert_score": result.expert_score,
               "final_ratio_mean_last10": float(np.mean(result.ratio_curve[-10:]))}
    if failure is not None:
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        raise failure
    return summary


def _transfer(cfg: ExperimentConfig, seed: int, run_dir: Path, sink, threads):
    t = cfg.sections["transfer"]
    src = load_checkpoint(resolve_path(t["source"], seed, "transfer source"))
    plan = TransferPlan(src, cfg.env_config(seed), t["mode"], t["logstd_init"])
    result = run_transfer(plan, cfg.ppo, seed, callback=sink, threads=threads)
    ckpt = make_checkpoint(result.policy, result.normalizer, plan.target, result.critic,
                           {"phase": cfg.phase.value, "seed": seed, "mode": plan.mode.value})
    save_checkpoint(ckpt, run_dir / CHECKPOINT_NAME)
    return {"mode": plan.mode.value, "source_env": src.env, "target_counts": list(plan.target.counts),
            "final_reported_reward": result.metrics[-1]["reported_reward"] if result.metrics else math.nan}


def _analyze(cfg: ExperimentConfig, seed: int, run_dir: Path, sink, threads):
    a = cfg.sections["analyze"]
    ckpt = load_checkpoint(resolve_path(a["checkpoint"], seed, "analyzed"))
    if ckpt.policy_kind != "modular":
        raise TypeMismatch("spectra need a modular policy checkpoint")
    policy = ckpt.build_policy()
    rollout = load_checkpoint(resolve_path(a["rollout"], seed, "rollout")).build_policy() if a["rollout"] else None
    env = cfg.env_config(seed) if "env" in cfg.sections else ckpt.env_config
    report = analysis.spectra_over_trajectories(policy, env, ckpt.normalizer, a["num_trajectories"],
                                                a["trajectory_seed"], rollout_policy=rollout)
    analysis.write_spectra_csv(run_dir / "spectra.csv", report)
    analysis.write_histogram_csv(run_dir / "histogram.csv", report, label=run_dir.name)
    return {"median": report.median, "fraction_below_0.1": report.frac_below, "num_states": report.num_states,
            "skipped_zero_jacobian": report.skipped}


PHASES = {
    Phase.TRAIN_EXPERT: _train_expert,
    Phase.PRETRAIN_MODULES: _pretrain,
    Phase.TRANSFER: _transfer,
    Phase.ANALYZE: _analyze,
}


def run_experiment(cfg: ExperimentConfig, seeds=None, output_dir=None) -> list[Path]:
    """Run the configured phase once per seed; returns the run directories."""
    seeds = list(seeds) if seeds is not None else cfg.seeds
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.config_hash()
    (out / "config.hash").write_text(digest + "\n")
    threads = 1 if cfg.deterministic else None
    runs = []
    for seed in seeds:
        run_id = cfg.run_id(seed)
        run_dir = out / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.hash").write_text(digest + "\n")
        (run_dir / "config.txt").write_text(cfg.serialize())
        sink = MetricsWriter(run_dir / "metrics.csv", run_id, cfg.phase, cfg.deterministic)
        try:
            summary = PHASES[cfg.phase](cfg, seed, run_dir, sink, threads)
        finally:
            sink.close()
        summary = {"run_id": run_id, "seed": seed, "phase": cfg.phase.value, **summary}
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        log.info("finished %s", run_id)
        runs.append(run_dir)
    return runs


# --- curve aggregation --------------------------------------------------------

def emit_curve_data(paths, out_path=None, x: str = "env_steps", columns=("reported_reward",)):
    """Per-step mean and sample std across runs; returns (steps, {column: (mean, std)})."""
    if not paths:
        raise AggregationError("no runs to aggregate")
    grids, values = [], {c: [] for c in columns}
    for p in paths:
        with open(p, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows or x not in rows[0]:
            raise AggregationError(f"{p} has no {x!r} column")
        rows = [r for r in rows if r[x] != ""]
        grids.append([float(r[x]) for r in rows])
        for c in columns:
            values[c].append([float(r[c]) if r.get(c, "") != "" else math.nan for r in rows])
    grid = grids[0]
    for g, p in zip(grids[1:], paths[1:]):
        if g != grid:
            raise AggregationError(f"{p} does not share the step grid of {paths[0]}")
    stats = {}
    for c in columns:
        arr = np.array(values[c])
        mean = arr.mean(axis=0)
        std = arr.std(axis=0, ddof=1) if len(paths) > 1 else np.zeros_like(mean)
        stats[c] = (mean, std)
    if out_path is not None:
        with open(out_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([x] + [f"{c}_{s}" for c in columns for s in ("mean", "std")] + ["runs"])
            for i, step in enumerate(grid):
                cells = [_cell(step)]
                for c in columns:
                    cells += [_cell(stats[c][0][i]), _cell(stats[c][1][i])]
                w.writerow(cells + [len(paths)])
    return np.array(grid), stats


# --- entry point --------------------------------------------------------------

SUBCOMMANDS = {
    "train-expert": Phase.TRAIN_EXPERT,
    "pretrain": Phase.PRETRAIN_MODULES,
    "transfer": Phase.TRANSFER,
    "analyze": Phase.ANALYZE,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, action="append", help="overrides the config's seeds (repeatable)")
        p.add_argument("--out", help="overrides output_dir")
    c = sub.add_parser("curves", help="aggregate metrics CSVs into mean/std curves")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--x", default="env_steps")
    c.add_argument("--column", action="append", help="metric column(s) to aggregate (default reported_reward)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "curves":
            emit_curve_data(args.runs, args.out, args.x, tuple(args.column or ["reported_reward"]))
            return EXIT_OK
        cfg = parse_config(args.config, SUBCOMMANDS[args.command])
        runs = run_experiment(cfg, args.seed, args.out)
        for r in runs:
            print(r)
        return EXIT_OK
    except ConfigError as exc:
        print(f"memo: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"memo: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except TrainingDiverged as exc:
        print(f"memo: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MemoError as exc:
        print(f"memo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
