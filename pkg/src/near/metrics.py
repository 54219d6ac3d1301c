"""Trajectory evaluation metrics: DTW pose error and spectral arc length.

DTW is the classic O(n*m) dynamic program with the symmetric step pattern and
pointwise L2 cost; the returned value is the unnormalized accumulated cost of
the optimal boundary-anchored path. SAL follows the SPARC procedure: spectrum
of the speed profile, DC-normalized, adaptive cutoff, negated arc length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricsError(Exception):
    pass


@dataclass
class Trajectory:
    samples: np.ndarray  # (T, d)
    dt: float = 1.0

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] < 2:
            raise MetricsError("trajectory needs at least 2 samples")
        if self.dt <= 0:
            raise MetricsError("dt must be positive")


def root_relative(traj: Trajectory, root_index: int, body_dim: int | None = None) -> Trajectory:
    """Subtract the root body's coordinate block from every body, per timestep."""
    d = traj.samples.shape[1]
    if body_dim is None:
        body_dim = d  # single body: the body is its own root
    if d % body_dim != 0:
        raise MetricsError("sample dim not divisible by body dim")
    n_bodies = d // body_dim
    if not 0 <= root_index < n_bodies:
        raise MetricsError(f"root index {root_index} out of range for {n_bodies} bodies")
    blocks = traj.samples.reshape(-1, n_bodies, body_dim)
    rel = blocks - blocks[:, root_index:root_index + 1, :]
    return Trajectory(rel.reshape(-1, d), traj.dt)


def dtw_error(a: np.ndarray, b: np.ndarray) -> float:
    """Accumulated cost of the optimal match/insert/delete alignment."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricsError("dtw needs nonempty sequences")
    # cost[i, j] = ||a_i - b_j||_2, vectorized
    diff = a[:, None, :] - b[None, :, :]
    cost = np.sqrt(np.sum(diff * diff, axis=2))
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        acc[i, 1:] = cost[i - 1]
        run = acc[i - 1]
        prev = acc[i]
        # acc[i, j] += min(acc[i-1, j-1], acc[i-1, j], acc[i, j-1]) needs the
        # left neighbour from this row, so sweep j explicitly.
        for j in range(1, m + 1):
            prev[j] += min(run[j - 1], run[j], prev[j - 1])
    return float(acc[n, m])


def avg_dtw_pose_error(policy_trajs: list, expert_trajs: list) -> float:
    """Mean DTW over all policy x expert pairs (inputs already root-relative)."""
    if not policy_trajs or not expert_trajs:
        raise MetricsError("need at least one trajectory on each side")
    total = 0.0
    for p in policy_trajs:
        for e in expert_trajs:
            total += dtw_error(p, e)
    return total / (len(policy_trajs) * len(expert_trajs))


def spectral_arc_length(
    traj: Trajectory,
    padding_factor: int = 4,
    cutoff_hz: float = 10.0,
    amplitude_threshold: float = 0.05,
) -> float:
    """SPARC spectral arc length of the trajectory's speed profile (<= 0)."""
    if traj.samples.shape[0] < 8:
        raise MetricsError("trajectory too short for a spectral estimate")
    speed = np.linalg.norm(np.diff(traj.samples, axis=0), axis=1) / traj.dt
    n_fft = int(2 ** np.ceil(np.log2(len(speed)))) * padding_factor
    mag = np.abs(np.fft.rfft(speed, n_fft))
    freqs = np.fft.rfftfreq(n_fft, d=traj.dt)
    if mag[0] == 0.0:
        raise MetricsError("zero-motion trajectory has no spectrum")
    mag = mag / mag[0]

    within_cutoff = freqs <= cutoff_hz
    freqs_sel = freqs[within_cutoff]
    mag_sel = mag[within_cutoff]
    # Adaptive cutoff: keep up to the last bin still above the amplitude
    # threshold (always keeping at least the first two bins).
    above = np.nonzero(mag_sel >= amplitude_threshold)[0]
    last = max(int(above[-1]), 1) if len(above) else 1
    freqs_sel = freqs_sel[: last + 1]
    mag_sel = mag_sel[: last + 1]

    f_range = freqs_sel[-1] - freqs_sel[0]
    if f_range <= 0:
        raise MetricsError("degenerate spectral band")
    df = np.diff(freqs_sel) / f_range
    dm = np.diff(mag_sel)
    return float(-np.sum(np.sqrt(df * df + dm * dm)))
