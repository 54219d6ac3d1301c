"""Command-line front end and experiment orchestration.

Verbs: gen-expert, train-energy, train-near, train-amp, eval, probe,
grid2pgm. Every command is a pure function of (config file, seed, input
checkpoints); reruns produce byte-identical outputs except for the manifest
timestamp. Exit codes: 0 success, 2 config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import amp_baseline, energy, maze_env, metrics, rl, training
from .amp_baseline import AmpError
from .annealing import AnnealingError
from .config import ConfigError, RunConfig, load_config
from .diffcore import DiffcoreError
from .energy import EnergyError
from .maze_env import MazeError
from .rl import RlError

NUMERICAL_ERRORS = (DiffcoreError, EnergyError, RlError, AmpError, AnnealingError,
                    MazeError, metrics.MetricsError, FloatingPointError)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_outdir(args, inputs: list) -> tuple[Path, RunConfig]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        cfg = load_config(args.config)
        shutil.copyfile(args.config, out / "config.toml")
    else:
        cfg = RunConfig()
        (out / "config.toml").write_text("# defaults\n")
    if args.seed is not None:
        cfg.seed = args.seed
    manifest = {
        "command": " ".join(sys.argv[1:]),
        "seed": cfg.seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out, cfg


def cmd_gen_expert(args) -> int:
    out, cfg = _prepare_outdir(args, [])
    rng = np.random.default_rng(cfg.seed)
    world = cfg.world.build()
    dataset = maze_env.generate_expert(world, cfg.expert.episodes, rng)
    maze_env.save_dataset(out / "dataset.csv", dataset)
    print(f"wrote {len(dataset)} transitions to {out / 'dataset.csv'}")
    return 0


def cmd_train_energy(args) -> int:
    out, cfg = _prepare_outdir(args, [args.dataset])
    rng = np.random.default_rng(cfg.seed)
    dataset = maze_env.load_dataset(args.dataset)
    scale = energy.geometric_scale(cfg.scale.sigma_max, cfg.scale.sigma_min,
                                   cfg.scale.levels)
    e = energy.train_energy(dataset, scale, cfg.energy, rng,
                            loss_log_path=out / "energy_loss.csv")
    energy.save_energy_checkpoint(out / "energy.ckpt", e, scale)
    print(f"wrote {out / 'energy.ckpt'}")
    return 0


def cmd_train_near(args) -> int:
    out, cfg = _prepare_outdir(args, [args.energy])
    rng = np.random.default_rng(cfg.seed)
    world = cfg.world.build()
    e, scale = energy.load_energy_checkpoint(args.energy)
    policy, value_fn, ctrl, rows, events = training.train_near(
        e, scale, world, cfg.near, cfg.rl, rng, log_path=out / "training_log.csv"
    )
    rl.save_policy_checkpoint(out / "policy.ckpt", policy, value_fn)
    print(f"wrote {out / 'policy.ckpt'} "
          f"({len(rows)} iterations, {len(events)} level switches)")
    return 0


def cmd_train_amp(args) -> int:
    out, cfg = _prepare_outdir(args, [args.dataset])
    rng = np.random.default_rng(cfg.seed)
    world = cfg.world.build()
    dataset = maze_env.load_dataset(args.dataset)
    policy, value_fn, disc, rows = amp_baseline.train_amp(
        dataset, world, cfg.amp, cfg.rl, cfg.near.n_envs, cfg.near.horizon,
        cfg.near.total_env_steps, rng,
        policy_hidden=cfg.near.policy_hidden, log_path=out / "training_log.csv",
    )
    rl.save_policy_checkpoint(out / "policy.ckpt", policy, value_fn)
    amp_baseline.save_discriminator_checkpoint(out / "discriminator.ckpt", disc)
    print(f"wrote {out / 'policy.ckpt'} and {out / 'discriminator.ckpt'}")
    return 0


def _task_reward_fn(world):
    def fn(states, next_states, task_rewards):
        return np.asarray(task_rewards, dtype=np.float64)
    return fn


def cmd_eval(args) -> int:
    inputs = [args.policy] + ([args.energy] if args.energy else [])
    out, cfg = _prepare_outdir(args, inputs)
    rng = np.random.default_rng(cfg.seed)
    world = cfg.world.build()
    policy, _value = rl.load_policy_checkpoint(args.policy)
    value_fn = _value

    if args.energy:
        e, scale = energy.load_energy_checkpoint(args.energy)
        sigma = float(scale.sigmas[0])

        def reward_fn(s, sn, tr):
            return energy.conditional_energy_batch(
                e, np.hstack([s, sn]), sigma, use_ema=True
            )
    else:
        reward_fn = _task_reward_fn(world)

    trajs, returns = training.evaluate_policy(
        policy, world, reward_fn, cfg.eval.episodes, rng, horizon=cfg.eval.horizon
    )
    top = training.top_k_trajectories(trajs, returns, cfg.eval.top_k)
    expert_rng = np.random.default_rng(cfg.seed + 1)
    expert_trajs = maze_env.generate_expert_trajectories(world, 20, expert_rng)
    avg_dtw = metrics.avg_dtw_pose_error(top, expert_trajs)
    sal_policy = float(np.mean([
        metrics.spectral_arc_length(metrics.Trajectory(t)) for t in top
        if len(t) >= 8
    ]))
    sal_expert = float(np.mean([
        metrics.spectral_arc_length(metrics.Trajectory(t)) for t in expert_trajs
    ]))
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["checkpoint", "avg_dtw", "sal_policy", "sal_expert"])
        w.writerow([Path(args.policy).name, repr(avg_dtw), repr(sal_policy),
                    repr(sal_expert)])
    print(f"avg_dtw={avg_dtw:.4f} sal_policy={sal_policy:.4f} "
          f"sal_expert={sal_expert:.4f}")
    return 0


def cmd_probe(args) -> int:
    inputs = [p for p in (args.energy, args.disc, args.policy, args.dataset) if p]
    out, cfg = _prepare_outdir(args, inputs)
    rng = np.random.default_rng(cfg.seed)
    world = cfg.world.build()
    pc = cfg.probe

    if args.kind == "energy-grid":
        e, _scale = energy.load_energy_checkpoint(_require(args.energy, "--energy"))
        amp_baseline.reward_grid(
            lambda X: energy.conditional_energy_batch(e, X, pc.sigma, use_ema=True),
            np.asarray(pc.fixed_state), pc.lattice, csv_path=out / "energy_grid.csv",
        )
    elif args.kind == "disc-grid":
        disc = amp_baseline.load_discriminator_checkpoint(_require(args.disc, "--disc"))
        amp_baseline.reward_grid(
            lambda X: amp_baseline.disc_reward(disc, X),
            np.asarray(pc.fixed_state), pc.lattice, csv_path=out / "disc_grid.csv",
        )
    elif args.kind == "perfect-disc":
        if args.dataset:
            expert = maze_env.load_dataset(args.dataset).features
            policy_samples = expert + rng.normal(0, 2.0, size=expert.shape)
        else:  # disjoint-support synthetic preset
            n = 256
            expert = -1.0 + 0.01 * rng.standard_normal((n, 1))
            policy_samples = 1.0 + 0.01 * rng.standard_normal((n, 1))
        amp_baseline.probe_perfect_discriminator(
            policy_samples, expert, rng, iterations=pc.iterations,
            csv_path=out / "perfect_disc.csv",
        )
    elif args.kind == "variance":
        disc = amp_baseline.load_discriminator_checkpoint(_require(args.disc, "--disc"))
        policy, value_fn = rl.load_policy_checkpoint(_require(args.policy, "--policy"))
        amp_baseline.probe_prediction_variance(
            policy, value_fn, disc, world, pc.n_rollouts, cfg.near.horizon, rng,
            csv_path=out / "variance.csv",
        )
    elif args.kind == "smoothness":
        dataset = maze_env.load_dataset(_require(args.dataset, "--dataset"))
        if args.energy:
            e, _scale = energy.load_energy_checkpoint(args.energy)
            predict = lambda X: energy.conditional_energy_batch(e, X, pc.sigma,
                                                                use_ema=True)
        else:
            disc = amp_baseline.load_discriminator_checkpoint(
                _require(args.disc, "--disc or --energy"))
            predict = lambda X: amp_baseline.disc_reward(disc, X)
        amp_baseline.probe_smoothness(
            predict, dataset.features, pc.radii, rng, n_samples=pc.n_samples,
            csv_path=out / "smoothness.csv",
        )
    elif args.kind == "density":
        dataset = maze_env.load_dataset(_require(args.dataset, "--dataset"))
        hist, xe, ye = np.histogram2d(
            dataset.features[:, 0], dataset.features[:, 1],
            bins=pc.density_bins, range=[[0, 10], [0, 10]],
        )
        with open(out / "density.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "count"])
            for i in range(pc.density_bins):
                for j in range(pc.density_bins):
                    w.writerow([repr(float(0.5 * (xe[i] + xe[i + 1]))),
                                repr(float(0.5 * (ye[j] + ye[j + 1]))),
                                int(hist[i, j])])
    else:
        raise ConfigError(f"unknown probe kind {args.kind!r}")
    print(f"probe {args.kind} written to {out}")
    return 0


def _require(value, name):
    if not value:
        raise ConfigError(f"this probe kind requires {name}")
    return value


def cmd_grid2pgm(args) -> int:
    """Convert an x,y,value grid CSV to a portable graymap (P2)."""
    rows = []
    with open(args.grid, newline="") as f:
        reader = csv.DictReader(f)
        value_col = [c for c in reader.fieldnames if c not in ("x", "y")][0]
        for row in reader:
            rows.append((float(row["x"]), float(row["y"]), float(row[value_col])))
    xs = sorted({r[0] for r in rows})
    ys = sorted({r[1] for r in rows})
    xi = {v: i for i, v in enumerate(xs)}
    yi = {v: i for i, v in enumerate(ys)}
    grid = np.zeros((len(ys), len(xs)))
    for x, y, v in rows:
        grid[yi[y], xi[x]] = v
    lo, hi = grid.min(), grid.max()
    scaled = np.zeros_like(grid, dtype=np.int64) if hi == lo else np.round(
        255 * (grid - lo) / (hi - lo)).astype(np.int64)
    out = Path(args.out) if args.out else Path(args.grid).with_suffix(".pgm")
    with open(out, "w") as f:
        f.write(f"P2\n{len(xs)} {len(ys)}\n255\n")
        for row in scaled[::-1]:  # y increases upward in the maze
            f.write(" ".join(str(v) for v in row) + "\n")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="near",
        description="Energy-based annealed rewards on the 2D maze imitation domain",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add(name, fn, **extra_args):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default="runs/out", help="output directory")
        for arg, kwargs in extra_args.items():
            p.add_argument(f"--{arg}", **kwargs)
        p.set_defaults(fn=fn)
        return p

    add("gen-expert", cmd_gen_expert)
    add("train-energy", cmd_train_energy,
        dataset={"required": True, "help": "expert dataset CSV"})
    add("train-near", cmd_train_near,
        energy={"required": True, "help": "energy checkpoint"})
    add("train-amp", cmd_train_amp,
        dataset={"required": True, "help": "expert dataset CSV"})
    add("eval", cmd_eval,
        policy={"required": True, "help": "policy checkpoint"},
        energy={"default": None, "help": "energy checkpoint for reward-ranked eval"})
    probe = add("probe", cmd_probe,
                energy={"default": None}, disc={"default": None},
                policy={"default": None}, dataset={"default": None})
    probe.add_argument("kind", choices=["energy-grid", "disc-grid", "perfect-disc",
                                        "variance", "smoothness", "density"])
    g = sub.add_parser("grid2pgm")
    g.add_argument("grid", help="grid CSV (x,y,value)")
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_grid2pgm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
