"""Heterogeneous multi-agent graph Q-networks on a desk-scale skirmish environment."""

__version__ = "0.1.0"
