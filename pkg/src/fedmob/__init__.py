"""Federated next-charge-location prediction for simulated EV taxi fleets."""

__version__ = "0.1.0"
