"""Desk-scale navigation lab: perception state encoding, Beta-policy PPO in a
batched dynamic-obstacle simulator, and a velocity-obstacle safety shield."""

__version__ = "0.1.0"
