"""Deterministic federated-learning simulator.

Implements error-weighted (SAMME-style) model aggregation with focal-loss
boosting of underperforming clients, alongside FedAvg, an aggregation-only
ablation, and a Ditto personalization baseline, with fairness metrics and
a reproducible experiment CLI.
"""

__version__ = "0.1.0"
