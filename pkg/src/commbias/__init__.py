"""Inductive biases for emergent communication in decentralized multi-agent RL."""

__version__ = "0.1.0"
