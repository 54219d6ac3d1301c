"""Noise-level scheduler: tracks energy progress against a per-level baseline.

Each policy-update cycle, the mean conditional energy of the transitions
gathered since the last update is compared to the baseline recorded when the
current level was entered. Progress beyond +/- alpha moves the level one step
up (smaller sigma) or down (larger sigma); the buffer clears every cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyNetwork, NoiseScale, conditional_energy_batch


class AnnealingError(Exception):
    pass


@dataclass
class AnnealingController:
    scale: NoiseScale
    alpha: float = 0.1
    level: int = 0
    baseline: float = 0.0
    baseline_armed: bool = False
    buffer: list = field(default_factory=list)

    def __post_init__(self):
        if self.alpha <= 0:
            raise AnnealingError("alpha must be positive")
        if not 0 <= self.level < len(self.scale):
            raise AnnealingError("level out of range")

    def current_sigma(self) -> float:
        return float(self.scale.sigmas[self.level])

    def record(self, transitions: np.ndarray) -> None:
        transitions = np.atleast_2d(np.asarray(transitions, dtype=np.float64))
        if transitions.size:
            self.buffer.append(transitions)

    def buffer_size(self) -> int:
        return sum(len(b) for b in self.buffer)

    def mean_buffer_energy(self, e: EnergyNetwork, use_ema: bool = True) -> float:
        if not self.buffer:
            raise AnnealingError("annealing buffer is empty")
        feats = np.vstack(self.buffer)
        return float(
            np.mean(conditional_energy_batch(e, feats, self.current_sigma(), use_ema))
        )

    def progress(self, e: EnergyNetwork, use_ema: bool = True) -> float:
        """Mean buffer energy over the level baseline, minus one.

        The first cycle at a level arms the baseline from that cycle's mean
        energy and reports zero progress.
        """
        mean_energy = self.mean_buffer_energy(e, use_ema)
        if not self.baseline_armed:
            self.baseline = mean_energy
            self.baseline_armed = True
            return 0.0
        return mean_energy / self.baseline - 1.0

    def maybe_switch(self, progress: float) -> str:
        """Returns "up", "down", or "stay"; clears the buffer either way."""
        decision = "stay"
        if progress > self.alpha and self.level < len(self.scale) - 1:
            self.level += 1
            decision = "up"
        elif progress < -self.alpha and self.level > 0:
            self.level -= 1
            decision = "down"
        if decision != "stay":
            self.baseline_armed = False
        self.buffer.clear()
        return decision
