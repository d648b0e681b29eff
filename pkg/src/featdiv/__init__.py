"""Desk-scale toolkit for transferable adversarial examples via high-level
feature diversification: tensor engine, small classifiers, momentum attacks,
sensitivity analyses, preprocessing defenses, and an evaluation harness."""

__version__ = "0.1.0"
