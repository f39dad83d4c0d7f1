"""Fairness-aware meta-learned recommender for cold-start users."""

__version__ = "0.1.0"
