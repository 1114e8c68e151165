"""Off-policy multi-agent RL with replay-time communication relabelling."""

from commrl.rng import RngStream

__all__ = ["RngStream"]
__version__ = "0.1.0"
