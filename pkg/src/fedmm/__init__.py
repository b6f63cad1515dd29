"""Federated-learning backdoor lab: multi-metric robust aggregation, attacks and baselines."""

__version__ = "0.1.0"
