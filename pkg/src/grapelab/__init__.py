"""Tabular policy-evaluation lab: GRAPE, Retrace and learning-rate baselines."""

__version__ = "0.1.0"
