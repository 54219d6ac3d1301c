"""2D L-maze imitation domain: point agent, scripted expert, transition features.

The corridor is the union of a vertical box (x in [0.5, 2.5], y in [0.5, 10])
and a horizontal box (x in [0.5, 9.5], y in [0.5, 2.5]) inside a 10x10 arena.
The agent starts in a window at the top of the vertical leg and the goal sits
at the bottom right. Dynamics are kinematic velocity commands with axis-wise
wall clamping, so every reachable state stays inside the corridor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .energy import ExpertDataset


class MazeError(Exception):
    pass


_BOXES = (
    ((0.5, 2.5), (0.5, 10.0)),  # vertical leg
    ((0.5, 9.5), (0.5, 2.5)),  # horizontal leg
)


@dataclass(frozen=True)
class MazeWorld:
    start_window: tuple = ((1.0, 2.0), (8.5, 9.5))  # (x-range, y-range)
    goal: tuple = (9.0, 1.5)
    goal_threshold: float = 0.3
    max_speed: float = 0.5
    horizon: int = 300
    expert_noise: float = 0.05

    def inside_corridor(self, p) -> bool:
        x, y = p
        return any(
            bx[0] <= x <= bx[1] and by[0] <= y <= by[1] for bx, by in _BOXES
        )

    def project(self, p: np.ndarray) -> np.ndarray:
        """Clamp a candidate position into the corridor (nearest box point)."""
        if self.inside_corridor(p):
            return p
        best, best_d = None, np.inf
        for (bx, by) in _BOXES:
            q = np.array([np.clip(p[0], bx[0], bx[1]), np.clip(p[1], by[0], by[1])])
            d = float(np.hypot(*(q - p)))
            if d < best_d:
                best, best_d = q, d
        return best


@dataclass
class EpisodeState:
    position: np.ndarray
    steps: int = 0
    done: bool = False
    done_reason: str | None = None  # "goal" | "horizon"


def reset(world: MazeWorld, rng: np.random.Generator) -> EpisodeState:
    (x0, x1), (y0, y1) = world.start_window
    pos = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
    return EpisodeState(position=pos)


def maze_task_reward(world: MazeWorld, s: np.ndarray, s_next: np.ndarray) -> float:
    """Progress toward the goal, clipped to [0, 1]."""
    goal = np.asarray(world.goal)
    d0 = float(np.linalg.norm(s - goal))
    d1 = float(np.linalg.norm(s_next - goal))
    return float(np.clip((d0 - d1) / world.max_speed, 0.0, 1.0))


def step(world: MazeWorld, state: EpisodeState, action: np.ndarray):
    """Apply a clamped velocity command. Returns (new_state, task_reward)."""
    if state.done:
        raise MazeError("cannot step a finished episode")
    a = np.clip(np.asarray(action, dtype=np.float64), -world.max_speed, world.max_speed)
    new_pos = world.project(state.position + a)
    steps = state.steps + 1
    reward = maze_task_reward(world, state.position, new_pos)
    done, reason = False, None
    if np.linalg.norm(new_pos - np.asarray(world.goal)) <= world.goal_threshold:
        done, reason = True, "goal"
    elif steps >= world.horizon:
        done, reason = True, "horizon"
    return EpisodeState(new_pos, steps, done, reason), reward


_WAYPOINTS = np.array([[1.5, 9.0], [1.5, 1.5], [9.0, 1.5]])


def expert_episode(world: MazeWorld, rng: np.random.Generator,
                   noise: float | None = None) -> np.ndarray:
    """One scripted waypoint-following episode; returns positions (T+1, 2)."""
    if noise is None:
        noise = world.expert_noise
    state = reset(world, rng)
    path = [state.position.copy()]
    wp_idx = 0
    while not state.done:
        target = _WAYPOINTS[wp_idx]
        delta = target - state.position
        dist = float(np.linalg.norm(delta))
        if dist < 0.25 and wp_idx < len(_WAYPOINTS) - 1:
            wp_idx += 1
            target = _WAYPOINTS[wp_idx]
            delta = target - state.position
            dist = float(np.linalg.norm(delta))
        direction = delta / max(dist, 1e-12)
        action = world.max_speed * direction
        if noise > 0:
            action = action + rng.normal(0.0, noise, size=2)
        state, _ = step(world, state, action)
        path.append(state.position.copy())
    return np.array(path)


def generate_expert(world: MazeWorld, n_episodes: int,
                    rng: np.random.Generator) -> ExpertDataset:
    """Scripted expert transitions (s, s') flattened to 4-D features."""
    if n_episodes < 1:
        raise MazeError("need at least one expert episode")
    rows = []
    for _ in range(n_episodes):
        path = expert_episode(world, rng)
        rows.append(np.hstack([path[:-1], path[1:]]))
    return ExpertDataset(np.vstack(rows))


def generate_expert_trajectories(world: MazeWorld, n_episodes: int,
                                 rng: np.random.Generator) -> list[np.ndarray]:
    return [expert_episode(world, rng) for _ in range(n_episodes)]


# ---------------------------------------------------------------------------
# Dataset CSV round trip. repr() of a float parses back to the same value.


def save_dataset(path, dataset: ExpertDataset) -> None:
    if dataset.dim != 4:
        raise MazeError("maze dataset CSV holds 4-D (sx,sy,snx,sny) features")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sx", "sy", "snx", "sny"])
        for row in dataset.features:
            w.writerow([repr(float(v)) for v in row])


def load_dataset(path) -> ExpertDataset:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["sx", "sy", "snx", "sny"]:
            raise MazeError(f"{path}: bad or missing header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MazeError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise MazeError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise MazeError(f"{path}: dataset is empty")
    return ExpertDataset(np.array(rows))
