"""PPO with GAE advantages and TD(lambda) targets for the maze domain.

The policy is a fixed-covariance diagonal Gaussian over velocity commands
(log-std -2.9 per component, never trained). Rollouts step a bank of
environments for a short horizon, resetting any environment that finishes
mid-rollout. Raw rewards are recentred against a short running baseline and
squashed with tanh before entering the advantage computation.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import diffcore, maze_env
from .diffcore import DenseNetwork
from .maze_env import MazeWorld


class RlError(Exception):
    pass


LOG_STD = -2.9


@dataclass
class GaussianPolicy:
    mean_net: DenseNetwork
    log_std: float = LOG_STD

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    @property
    def std(self) -> float:
        return float(np.exp(self.log_std))


@dataclass
class ValueFunction:
    net: DenseNetwork

    def __post_init__(self):
        if self.net.out_dim != 1:
            raise RlError("value function must have scalar output")


def init_policy(state_dim: int, action_dim: int, hidden: list[int],
                rng: np.random.Generator) -> GaussianPolicy:
    net = diffcore.make_mlp([state_dim, *hidden, action_dim], "relu", rng)
    # Start near-zero so the fixed exploration noise dominates early actions.
    net.layers[-1].weight = net.layers[-1].weight * 0.01
    return GaussianPolicy(net)


def init_value(state_dim: int, hidden: list[int], rng: np.random.Generator) -> ValueFunction:
    return ValueFunction(diffcore.make_mlp([state_dim, *hidden, 1], "relu", rng))


def log_prob(policy: GaussianPolicy, mean: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log density; mean/action shaped (..., action_dim)."""
    var = policy.std**2
    sq = np.sum((action - mean) ** 2, axis=-1)
    d = policy.action_dim
    return -0.5 * (sq / var + d * (np.log(2.0 * np.pi) + 2.0 * policy.log_std))


def sample_action(policy: GaussianPolicy, state: np.ndarray,
                  rng: np.random.Generator, deterministic: bool = False):
    """Returns (action, log_prob). Deterministic mode returns the mean."""
    mean = diffcore.forward(policy.mean_net, np.asarray(state, dtype=np.float64))
    if deterministic:
        action = mean
    else:
        action = mean + policy.std * rng.standard_normal(policy.action_dim)
    return action, float(log_prob(policy, mean, action))


@dataclass
class RolloutBuffer:
    """Arrays shaped (n_envs, horizon, ...); bootstrap values (n_envs,)."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    raw_rewards: np.ndarray
    rewards: np.ndarray  # transformed
    dones: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    bootstrap_values: np.ndarray

    @property
    def n_envs(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def flat(self, arr: np.ndarray) -> np.ndarray:
        return arr.reshape(self.n_envs * self.horizon, *arr.shape[2:])


class ReturnTracker:
    """Ring buffer of the last k horizon-normalized returns (k=3 by default)."""

    def __init__(self, k: int = 3):
        self._buf = deque(maxlen=k)

    def push(self, normalized_return: float) -> None:
        self._buf.append(float(normalized_return))

    def baseline(self) -> float:
        if not self._buf:
            return 0.0
        return float(np.mean(self._buf))


def transform_reward(r_tilde, tracker: ReturnTracker):
    """tanh((r_tilde - baseline) / 10); baseline is 0 until returns arrive."""
    return np.tanh((np.asarray(r_tilde, dtype=np.float64) - tracker.baseline()) / 10.0)


def compose_reward(r_task, energy_reward, w_task: float = 0.5, w_energy: float = 0.5):
    if w_task < 0 or w_energy < 0:
        raise RlError("reward weights must be nonnegative")
    return w_task * np.asarray(r_task, dtype=np.float64) + w_energy * np.asarray(
        energy_reward, dtype=np.float64
    )


def rollout(
    policy: GaussianPolicy,
    value_fn: ValueFunction,
    world: MazeWorld,
    env_states: list,
    horizon: int,
    reward_fn,
    tracker: ReturnTracker,
    env_rngs: list,
) -> RolloutBuffer:
    """Step every environment `horizon` steps with mid-rollout resets.

    reward_fn(states, next_states, task_rewards) -> raw rewards (batched over
    the environment bank); the tanh transform against the tracker baseline is
    applied here. env_states is mutated in place so rollouts are contiguous.
    """
    if horizon < 1:
        raise RlError("horizon must be >= 1")
    n = len(env_states)
    state_dim = 2
    act_dim = policy.action_dim
    S = np.empty((n, horizon, state_dim))
    A = np.empty((n, horizon, act_dim))
    SN = np.empty((n, horizon, state_dim))
    TASK = np.empty((n, horizon))
    D = np.zeros((n, horizon))
    LP = np.empty((n, horizon))
    V = np.empty((n, horizon))

    for t in range(horizon):
        cur = np.array([es.position for es in env_states])
        means = diffcore.forward_batch(policy.mean_net, cur)
        noise = np.array([env_rngs[i].standard_normal(act_dim) for i in range(n)])
        actions = means + policy.std * noise
        LP[:, t] = log_prob(policy, means, actions)
        V[:, t] = diffcore.forward_batch(value_fn.net, cur)[:, 0]
        S[:, t] = cur
        A[:, t] = actions
        for i in range(n):
            new_state, task_r = maze_env.step(world, env_states[i], actions[i])
            SN[i, t] = new_state.position
            TASK[i, t] = task_r
            D[i, t] = 1.0 if new_state.done else 0.0
            env_states[i] = (
                maze_env.reset(world, env_rngs[i]) if new_state.done else new_state
            )

    raw = reward_fn(S.reshape(-1, state_dim), SN.reshape(-1, state_dim),
                    TASK.reshape(-1)).reshape(n, horizon)
    if not np.all(np.isfinite(raw)):
        raise RlError("reward function produced non-finite values")
    transformed = transform_reward(raw, tracker)
    boot = diffcore.forward_batch(
        value_fn.net, np.array([es.position for es in env_states])
    )[:, 0]
    return RolloutBuffer(S, A, SN, raw, transformed, D, LP, V, boot)


def gae_advantages(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                   gamma: float = 0.99, lam: float = 0.95) -> np.ndarray:
    """A_t = delta_t + gamma*lam*(1-done_t)*A_{t+1}; values carries a bootstrap tail."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    if len(values) != T + 1 or len(dones) != T:
        raise RlError("gae: values needs one bootstrap entry; dones must match rewards")
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * nonterm * values[t + 1] - values[t]
        acc = delta + gamma * lam * nonterm * acc
        adv[t] = acc
    return adv


def td_lambda_targets(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                      gamma: float = 0.99, lam: float = 0.95) -> np.ndarray:
    """Lambda-return targets: GAE advantages plus the value baseline."""
    return gae_advantages(rewards, values, dones, gamma, lam) + np.asarray(
        values, dtype=np.float64
    )[:-1]


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    td_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 5e-5
    mini_epochs: int = 4
    minibatch_size: int = 256
    normalize_advantages: bool = True


@dataclass
class PpoState:
    policy_adam: diffcore.AdamState
    value_adam: diffcore.AdamState

    @classmethod
    def init(cls, policy: GaussianPolicy, value_fn: ValueFunction,
             config: PpoConfig) -> "PpoState":
        return cls(
            diffcore.AdamState.init(policy.mean_net.params(), lr=config.lr),
            diffcore.AdamState.init(value_fn.net.params(), lr=config.lr),
        )


def ppo_update(
    policy: GaussianPolicy,
    value_fn: ValueFunction,
    buffer: RolloutBuffer,
    config: PpoConfig,
    opt: PpoState,
    rng: np.random.Generator,
) -> dict:
    """Clipped-surrogate PPO epochs over shuffled minibatches. Mutates nets/opt."""
    states = buffer.flat(buffer.states)
    actions = buffer.flat(buffer.actions)
    old_logp = buffer.flat(buffer.log_probs)
    n = states.shape[0]

    advantages = np.empty((buffer.n_envs, buffer.horizon))
    targets = np.empty((buffer.n_envs, buffer.horizon))
    for i in range(buffer.n_envs):
        vals = np.append(buffer.values[i], buffer.bootstrap_values[i])
        advantages[i] = gae_advantages(
            buffer.rewards[i], vals, buffer.dones[i], config.gamma, config.gae_lambda
        )
        targets[i] = td_lambda_targets(
            buffer.rewards[i], vals, buffer.dones[i], config.gamma, config.td_lambda
        )
    advantages = advantages.reshape(-1)
    targets = targets.reshape(-1)
    if config.normalize_advantages and advantages.std() > 1e-12:
        advantages = (advantages - advantages.mean()) / advantages.std()

    var = policy.std**2
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "n_batches": 0}
    for _ in range(config.mini_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            s, a, adv, tgt, lp_old = (states[idx], actions[idx], advantages[idx],
                                      targets[idx], old_logp[idx])
            m = len(idx)

            mean = diffcore.forward_batch(policy.mean_net, s)
            lp_new = log_prob(policy, mean, a)
            ratio = np.exp(lp_new - lp_old)
            surr1 = ratio * adv
            surr2 = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv
            policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
            # Gradient flows through ratio only where the unclipped branch wins.
            active = (surr1 <= surr2).astype(np.float64)
            dlogp = -(active * ratio * adv) / m  # d policy_loss / d lp_new
            dmean = dlogp[:, None] * (a - mean) / var
            _, pgrads, _ = diffcore.backward_batch(policy.mean_net, s, dmean)

            v = diffcore.forward_batch(value_fn.net, s)[:, 0]
            value_loss = float(0.5 * np.mean((v - tgt) ** 2))
            dv = ((v - tgt) / m)[:, None]
            _, vgrads, _ = diffcore.backward_batch(value_fn.net, s, dv)

            if not (np.isfinite(policy_loss) and np.isfinite(value_loss)):
                raise RlError("PPO loss diverged")
            new_p, opt.policy_adam = diffcore.adam_step(
                policy.mean_net.params(), pgrads, opt.policy_adam
            )
            policy.mean_net.set_params(new_p)
            new_v, opt.value_adam = diffcore.adam_step(
                value_fn.net.params(), vgrads, opt.value_adam
            )
            value_fn.net.set_params(new_v)

            stats["policy_loss"] += policy_loss
            stats["value_loss"] += value_loss
            stats["n_batches"] += 1
    stats["policy_loss"] /= max(stats["n_batches"], 1)
    stats["value_loss"] /= max(stats["n_batches"], 1)
    return stats


def save_policy_checkpoint(path, policy: GaussianPolicy, value_fn: ValueFunction) -> None:
    meta, arrays = diffcore.network_to_arrays(policy.mean_net, "policy")
    vmeta, varrays = diffcore.network_to_arrays(value_fn.net, "value")
    meta.update(vmeta)
    arrays.update(varrays)
    meta.update({"kind": "policy", "version": 1, "log_std": policy.log_std})
    diffcore.save_checkpoint(path, meta, arrays)


def load_policy_checkpoint(path):
    meta, arrays = diffcore.load_checkpoint(path)
    if meta.get("kind") != "policy":
        raise RlError(f"{path}: not a policy checkpoint")
    policy = GaussianPolicy(
        diffcore.network_from_arrays(meta, arrays, "policy"), meta["log_std"]
    )
    value_fn = ValueFunction(diffcore.network_from_arrays(meta, arrays, "value"))
    return policy, value_fn
