"""Reinforcement-learned adversarial perturbations against neural translation models."""

__version__ = "0.1.0"
