"""tjunction: T-intersection driving game, guided meta-RL training, and evaluation."""

__version__ = "0.1.0"
