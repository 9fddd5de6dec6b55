"""Temporal action priors for goal-conditioned reinforcement learning in point mazes."""

__version__ = "0.1.0"
