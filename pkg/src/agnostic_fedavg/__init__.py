"""Agnostic federated averaging under stochastic, non-uniform client participation."""

__version__ = "0.1.0"
