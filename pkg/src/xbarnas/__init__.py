"""Crossbar-aware one-shot architecture search with adversarial training, in numpy."""

__version__ = "0.1.0"
