"""Semantic-ID generative recommendation training with token pruning and an auxiliary lookahead head."""

__version__ = "0.1.0"
