"""Adversarial robustness of flow-based likelihood models: exact Gaussian
theory plus attacks and defenses on a small normalizing flow."""

__version__ = "0.1.0"
