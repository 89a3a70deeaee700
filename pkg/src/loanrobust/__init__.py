"""Adversarial attacks and multiplicative-weights robust training for a
small dense loan-grade classifier, in plain numpy."""

__version__ = "0.1.0"
