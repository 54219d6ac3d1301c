"""Energy-based annealed rewards for imitation from observation, desk scale."""

__version__ = "0.1.0"
