"""Entropy-controlled exploration for legged locomotion with PPO."""

__version__ = "0.1.0"
