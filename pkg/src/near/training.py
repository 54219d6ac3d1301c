"""End-to-end NEAR training: annealed energy rewards driving PPO."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import maze_env, rl
from .annealing import AnnealingController
from .energy import EnergyNetwork, NoiseScale, conditional_energy_batch
from .maze_env import MazeWorld


@dataclass
class NearTrainConfig:
    n_envs: int = 64
    horizon: int = 16
    total_env_steps: int = 300000
    policy_hidden: list[int] = field(default_factory=lambda: [128, 128])
    alpha: float = 0.1
    start_level: int = 0
    reward_mode: str = "energy-only"  # "energy-only" | "composed"
    w_task: float = 0.5
    w_energy: float = 0.5
    use_ema: bool = True


def train_near(
    energy: EnergyNetwork,
    scale: NoiseScale,
    world: MazeWorld,
    near_config: NearTrainConfig,
    ppo_config: rl.PpoConfig,
    rng: np.random.Generator,
    log_path=None,
):
    """Alg-style loop: rollout with annealed energy rewards, then PPO update.

    Returns (policy, value_fn, controller, log_rows, event_rows).
    """
    cfg = near_config
    policy = rl.init_policy(2, 2, cfg.policy_hidden, rng)
    value_fn = rl.init_value(2, cfg.policy_hidden, rng)
    opt = rl.PpoState.init(policy, value_fn, ppo_config)
    ctrl = AnnealingController(scale=scale, alpha=cfg.alpha, level=cfg.start_level)
    tracker = rl.ReturnTracker()

    env_rngs = [np.random.default_rng(s)
                for s in rng.bit_generator.seed_seq.spawn(cfg.n_envs)]
    env_states = [maze_env.reset(world, env_rngs[i]) for i in range(cfg.n_envs)]

    def reward_fn(states, next_states, task_rewards):
        feats = np.hstack([states, next_states])
        e_vals = conditional_energy_batch(energy, feats, ctrl.current_sigma(),
                                          use_ema=cfg.use_ema)
        if cfg.reward_mode == "composed":
            return rl.compose_reward(task_rewards, e_vals, cfg.w_task, cfg.w_energy)
        return e_vals

    rows, events = [], []
    steps_per_iter = cfg.n_envs * cfg.horizon
    n_iters = max(cfg.total_env_steps // steps_per_iter, 1)
    for it in range(n_iters):
        buf = rl.rollout(policy, value_fn, world, env_states, cfg.horizon,
                         reward_fn, tracker, env_rngs)
        feats = np.hstack([buf.flat(buf.states), buf.flat(buf.next_states)])
        ctrl.record(feats)

        old_sigma = ctrl.current_sigma()
        progress = ctrl.progress(energy, use_ema=cfg.use_ema)
        decision = ctrl.maybe_switch(progress)
        if decision != "stay":
            events.append({
                "iter": it,
                "event": f"switch_{decision}",
                "old_sigma": old_sigma,
                "new_sigma": ctrl.current_sigma(),
                "progress": progress,
            })

        tracker.push(float(np.mean(buf.raw_rewards)))
        stats = rl.ppo_update(policy, value_fn, buf, ppo_config, opt, rng)
        rows.append({
            "iter": it,
            "env_steps": (it + 1) * steps_per_iter,
            "mean_raw_return": float(np.mean(buf.raw_rewards)),
            "mean_transformed_return": float(np.mean(buf.rewards)),
            "noise_level": old_sigma,
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
        })

    if log_path is not None:
        write_training_log(log_path, rows, events)
    return policy, value_fn, ctrl, rows, events


def write_training_log(path, rows, events=None):
    fields = ["iter", "env_steps", "mean_raw_return", "mean_transformed_return",
              "noise_level", "policy_loss", "value_loss"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for r in rows:
            w.writerow([r["iter"], r["env_steps"]] +
                       [repr(float(r[k])) for k in fields[2:]])
        if events:
            w.writerow(["iter", "event", "old_sigma", "new_sigma", "progress"])
            for ev in events:
                w.writerow([ev["iter"], ev["event"], repr(float(ev["old_sigma"])),
                            repr(float(ev["new_sigma"])), repr(float(ev["progress"]))])


def evaluate_policy(
    policy: rl.GaussianPolicy,
    world: MazeWorld,
    reward_fn,
    n_episodes: int,
    rng: np.random.Generator,
    horizon: int | None = None,
):
    """Deterministic (mean-action) episodes.

    Returns (trajectories, per-step mean rewards). Per-step normalization keeps
    short goal-terminated episodes comparable with full-horizon ones when
    ranking for top-k selection.
    """
    import dataclasses

    eval_world = dataclasses.replace(world, horizon=horizon or world.horizon)
    trajs, returns = [], []
    for _ in range(n_episodes):
        state = maze_env.reset(eval_world, rng)
        path = [state.position.copy()]
        total = 0.0
        while not state.done:
            action, _ = rl.sample_action(policy, state.position, rng, deterministic=True)
            new_state, task_r = maze_env.step(eval_world, state, action)
            total += float(reward_fn(state.position[None, :],
                                     new_state.position[None, :],
                                     np.array([task_r]))[0])
            state = new_state
            path.append(state.position.copy())
        trajs.append(np.array(path))
        returns.append(total / (len(path) - 1))
    return trajs, np.array(returns)


def top_k_trajectories(trajs, returns, k: int):
    order = np.argsort(returns)[::-1][:k]
    return [trajs[i] for i in order]
