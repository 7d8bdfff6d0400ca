"""Decentralized composite optimization with probabilistic multi-gossip skipping."""

__version__ = "0.1.0"
