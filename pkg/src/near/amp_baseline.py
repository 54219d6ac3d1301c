"""Adversarial baseline: logit-output discriminator, GAN reward, and probes.

The discriminator maps transition features to a raw logit; the classification
loss is binary cross-entropy on sigmoid(logit), plus a gradient penalty on
expert samples and a squared-logit output regularizer. Probes instrument the
classic failure modes: perfect discrimination, prediction variance across
rollouts, and non-smoothness at increasing distances from the data manifold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import diffcore, maze_env, rl
from .diffcore import DenseNetwork
from .maze_env import MazeWorld


class AmpError(Exception):
    pass


@dataclass
class Discriminator:
    net: DenseNetwork  # features -> raw logit
    grad_penalty_coeff: float = 5.0
    output_reg_coeff: float = 0.05
    bce_coeff: float = 5.0

    def __post_init__(self):
        if self.net.out_dim != 1:
            raise AmpError("discriminator must output a scalar logit")

    def logits(self, X: np.ndarray) -> np.ndarray:
        return diffcore.forward_batch(self.net, np.atleast_2d(X))[:, 0]

    def predictions(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(X))


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_discriminator(dim: int, hidden: list[int], rng: np.random.Generator,
                       **coeffs) -> Discriminator:
    return Discriminator(diffcore.make_mlp([dim, *hidden, 1], "relu", rng), **coeffs)


def disc_loss(disc: Discriminator, expert_batch: np.ndarray, policy_batch: np.ndarray):
    """BCE + gradient penalty (expert side) + logit regularizer; exact grads."""
    expert_batch = np.atleast_2d(np.asarray(expert_batch, dtype=np.float64))
    policy_batch = np.atleast_2d(np.asarray(policy_batch, dtype=np.float64))
    if expert_batch.shape[0] == 0 or policy_batch.shape[0] == 0:
        raise AmpError("empty discriminator batch")
    n_e, n_p = expert_batch.shape[0], policy_batch.shape[0]
    n = n_e + n_p

    logit_e = disc.logits(expert_batch)
    logit_p = disc.logits(policy_batch)
    d_e = _sigmoid(logit_e)
    d_p = _sigmoid(logit_p)
    eps = 1e-12
    bce = -float(np.mean(np.log(d_e + eps))) - float(np.mean(np.log(1.0 - d_p + eps)))

    # d BCE / d logit: expert side (d-1)/n_e, policy side d/n_p.
    dl_e = disc.bce_coeff * (d_e - 1.0) / n_e
    dl_p = disc.bce_coeff * d_p / n_p
    # Output regularizer over both batches combined.
    dl_e = dl_e + disc.output_reg_coeff * 2.0 * logit_e / n
    dl_p = dl_p + disc.output_reg_coeff * 2.0 * logit_p / n
    _, grads_e, _ = diffcore.backward_batch(disc.net, expert_batch, dl_e[:, None])
    _, grads_p, _ = diffcore.backward_batch(disc.net, policy_batch, dl_p[:, None])

    # Gradient penalty on expert samples: coeff * E[||grad_x logit||^2].
    gx = diffcore.input_gradient_batch(disc.net, expert_batch)
    gp = float(np.mean(np.sum(gx * gx, axis=1)))
    V = 2.0 * disc.grad_penalty_coeff * gx / n_e
    _, grads_gp = diffcore.input_grad_functional_param_grads(disc.net, expert_batch, V)

    reg = float(np.mean(np.concatenate([logit_e, logit_p]) ** 2))
    loss = disc.bce_coeff * bce + disc.grad_penalty_coeff * gp + disc.output_reg_coeff * reg
    grads = [ge + gp_ + gpen for ge, gp_, gpen in zip(grads_e, grads_p, grads_gp)]
    return loss, grads, {"bce": bce, "grad_penalty": gp, "output_reg": reg}


def disc_reward(disc: Discriminator, features: np.ndarray) -> np.ndarray:
    """-log(max(1 - sigmoid(logit), 1e-4)): bounded, monotone in the logit."""
    d = _sigmoid(disc.logits(features))
    return -np.log(np.maximum(1.0 - d, 1e-4))


def disc_accuracy(disc: Discriminator, expert: np.ndarray, policy: np.ndarray) -> float:
    d_e = disc.predictions(expert)
    d_p = disc.predictions(policy)
    correct = float(np.sum(d_e > 0.5) + np.sum(d_p <= 0.5))
    return correct / (len(d_e) + len(d_p))


@dataclass
class AmpConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    disc_batch_size: int = 128
    disc_lr: float = 1e-4
    disc_updates_per_iter: int = 2
    demo_buffer_capacity: int = 20000
    grad_penalty_coeff: float = 5.0
    output_reg_coeff: float = 0.05
    bce_coeff: float = 5.0


def train_amp(
    dataset,
    world: MazeWorld,
    amp_config: AmpConfig,
    ppo_config: rl.PpoConfig,
    n_envs: int,
    horizon: int,
    total_env_steps: int,
    rng: np.random.Generator,
    policy_hidden: list[int] = (64, 64),
    log_path=None,
):
    """Alternate rollout -> discriminator update -> PPO update.

    Returns (policy, value_fn, discriminator, log_rows).
    """
    if len(dataset) == 0:
        raise AmpError("empty expert dataset")
    demo = dataset.features[-amp_config.demo_buffer_capacity:]
    policy = rl.init_policy(2, 2, list(policy_hidden), rng)
    value_fn = rl.init_value(2, list(policy_hidden), rng)
    disc = init_discriminator(
        dataset.dim, list(amp_config.hidden), rng,
        grad_penalty_coeff=amp_config.grad_penalty_coeff,
        output_reg_coeff=amp_config.output_reg_coeff,
        bce_coeff=amp_config.bce_coeff,
    )
    opt = rl.PpoState.init(policy, value_fn, ppo_config)
    disc_adam = diffcore.AdamState.init(disc.net.params(), lr=amp_config.disc_lr)

    env_rngs = [np.random.default_rng(s) for s in rng.bit_generator.seed_seq.spawn(n_envs)]
    env_states = [maze_env.reset(world, env_rngs[i]) for i in range(n_envs)]
    tracker = rl.ReturnTracker()

    def reward_fn(states, next_states, task_rewards):
        feats = np.hstack([states, next_states])
        return disc_reward(disc, feats)

    rows = []
    steps_per_iter = n_envs * horizon
    n_iters = max(total_env_steps // steps_per_iter, 1)
    for it in range(n_iters):
        buf = rl.rollout(policy, value_fn, world, env_states, horizon,
                         reward_fn, tracker, env_rngs)
        feats = np.hstack([buf.flat(buf.states), buf.flat(buf.next_states)])

        acc = loss = mean_pred = std_pred = 0.0
        for _ in range(amp_config.disc_updates_per_iter):
            e_idx = rng.integers(0, len(demo), size=amp_config.disc_batch_size)
            p_idx = rng.integers(0, len(feats), size=amp_config.disc_batch_size)
            loss, grads, _ = disc_loss(disc, demo[e_idx], feats[p_idx])
            if not np.isfinite(loss):
                raise AmpError(f"discriminator loss diverged (iteration {it})")
            new_p, disc_adam = diffcore.adam_step(disc.net.params(), grads, disc_adam)
            disc.net.set_params(new_p)
        preds = disc.predictions(feats)
        mean_pred, std_pred = float(np.mean(preds)), float(np.std(preds))
        e_idx = rng.integers(0, len(demo), size=min(512, len(demo)))
        acc = disc_accuracy(disc, demo[e_idx], feats)

        tracker.push(float(np.mean(buf.raw_rewards)))
        stats = rl.ppo_update(policy, value_fn, buf, ppo_config, opt, rng)
        rows.append({
            "iter": it,
            "env_steps": (it + 1) * steps_per_iter,
            "mean_raw_return": float(np.mean(buf.raw_rewards)),
            "mean_transformed_return": float(np.mean(buf.rewards)),
            "disc_loss": loss,
            "disc_accuracy": acc,
            "disc_mean_pred": mean_pred,
            "disc_std_pred": std_pred,
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
        })

    if log_path is not None:
        _write_csv(log_path, rows)
    return policy, value_fn, disc, rows


def _write_csv(path, rows):
    with open(path, "w", newline="") as f:
        if not rows:
            f.write("")
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v)
                        for k, v in r.items()})


# ---------------------------------------------------------------------------
# Diagnostic probes.


def probe_perfect_discriminator(
    policy_samples: np.ndarray,
    expert_samples: np.ndarray,
    rng: np.random.Generator,
    iterations: int = 200,
    hidden: list[int] = (64, 64),
    lr: float = 1e-3,
    csv_path=None,
):
    """Retrain a fresh discriminator on frozen sample sets.

    The probe isolates the adversarial classification dynamics, so the
    retrained discriminator is plain BCE (no gradient penalty or output
    regularizer — those terms exist to damp exactly this failure mode).
    Records per-iteration accuracy, BCE, and mean input-gradient norm of the
    sigmoid prediction over the union of both sample sets.
    """
    expert_samples = np.atleast_2d(np.asarray(expert_samples, dtype=np.float64))
    policy_samples = np.atleast_2d(np.asarray(policy_samples, dtype=np.float64))
    disc = init_discriminator(expert_samples.shape[1], list(hidden), rng,
                              grad_penalty_coeff=0.0, output_reg_coeff=0.0,
                              bce_coeff=1.0)
    adam = diffcore.AdamState.init(disc.net.params(), lr=lr)
    both = np.vstack([expert_samples, policy_samples])
    rows = []
    for it in range(iterations):
        loss, grads, parts = disc_loss(disc, expert_samples, policy_samples)
        gx = diffcore.input_gradient_batch(disc.net, both)
        d = disc.predictions(both)
        # grad of sigmoid(logit) w.r.t. x: d(1-d) * grad logit
        grad_norm = float(np.mean(np.linalg.norm((d * (1 - d))[:, None] * gx, axis=1)))
        rows.append({
            "iter": it,
            "accuracy": disc_accuracy(disc, expert_samples, policy_samples),
            "bce": parts["bce"],
            "grad_norm": grad_norm,
        })
        new_p, adam = diffcore.adam_step(disc.net.params(), grads, adam)
        disc.net.set_params(new_p)
    if csv_path is not None:
        _write_csv(csv_path, rows)
    return disc, rows


def probe_prediction_variance(
    policy: rl.GaussianPolicy,
    value_fn: rl.ValueFunction,
    disc: Discriminator,
    world: MazeWorld,
    n_rollouts: int,
    horizon: int,
    rng: np.random.Generator,
    csv_path=None,
):
    """Per-rollout reward statistics of a frozen policy under a frozen reward."""
    rows = []
    tracker = rl.ReturnTracker()
    for r_idx in range(n_rollouts):
        env_rngs = [np.random.default_rng(s)
                    for s in rng.bit_generator.seed_seq.spawn(1)]
        env_states = [maze_env.reset(world, env_rngs[0])]
        buf = rl.rollout(
            policy, value_fn, world, env_states, horizon,
            lambda s, sn, tr: disc_reward(disc, np.hstack([s, sn])),
            tracker, env_rngs,
        )
        rows.append({
            "rollout": r_idx,
            "mean_reward": float(np.mean(buf.raw_rewards)),
            "std_reward": float(np.std(buf.raw_rewards)),
        })
    if csv_path is not None:
        _write_csv(csv_path, rows)
    return rows


def probe_smoothness(
    predict_fn,
    dataset_features: np.ndarray,
    radii,
    rng: np.random.Generator,
    n_samples: int = 2000,
    csv_path=None,
):
    """Mean/std model output on expert samples pushed to fixed distances.

    predict_fn maps an (N, D) feature batch to N scalars (energy at a fixed
    sigma, or a discriminator reward). Perturbations are isotropic Gaussian
    directions scaled to exactly the requested radius.
    """
    feats = np.atleast_2d(np.asarray(dataset_features, dtype=np.float64))
    rows = []
    for radius in radii:
        if radius < 0:
            raise AmpError("radii must be nonnegative")
        idx = rng.integers(0, len(feats), size=n_samples)
        base = feats[idx]
        if radius == 0:
            pts = base
        else:
            dirs = rng.standard_normal(base.shape)
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            pts = base + radius * dirs
        preds = np.asarray(predict_fn(pts), dtype=np.float64)
        rows.append({
            "radius": float(radius),
            "mean_pred": float(np.mean(preds)),
            "std_pred": float(np.std(preds)),
        })
    if csv_path is not None:
        _write_csv(csv_path, rows)
    return rows


def reward_grid(predict_fn, fixed_state: np.ndarray, lattice: int = 100,
                x_range=(0.0, 10.0), y_range=(0.0, 10.0), csv_path=None):
    """Dense grid of rew(s'|s) around a fixed s, for heatmap dumps."""
    xs = np.linspace(*x_range, lattice)
    ys = np.linspace(*y_range, lattice)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    s_next = np.column_stack([gx.ravel(), gy.ravel()])
    s = np.tile(np.asarray(fixed_state, dtype=np.float64), (len(s_next), 1))
    vals = np.asarray(predict_fn(np.hstack([s, s_next])), dtype=np.float64)
    rows = [
        {"x": float(x), "y": float(y), "mean_reward": float(v)}
        for (x, y), v in zip(s_next, vals)
    ]
    if csv_path is not None:
        _write_csv(csv_path, rows)
    return rows


def save_discriminator_checkpoint(path, disc: Discriminator) -> None:
    meta, arrays = diffcore.network_to_arrays(disc.net, "disc")
    meta.update({
        "kind": "discriminator",
        "version": 1,
        "grad_penalty_coeff": disc.grad_penalty_coeff,
        "output_reg_coeff": disc.output_reg_coeff,
        "bce_coeff": disc.bce_coeff,
    })
    diffcore.save_checkpoint(path, meta, arrays)


def load_discriminator_checkpoint(path) -> Discriminator:
    meta, arrays = diffcore.load_checkpoint(path)
    if meta.get("kind") != "discriminator":
        raise AmpError(f"{path}: not a discriminator checkpoint")
    return Discriminator(
        diffcore.network_from_arrays(meta, arrays, "disc"),
        grad_penalty_coeff=meta["grad_penalty_coeff"],
        output_reg_coeff=meta["output_reg_coeff"],
        bce_coeff=meta["bce_coeff"],
    )
