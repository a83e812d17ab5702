"""Distributed, network-aware EV charging by dual-consensus ADMM."""

__version__ = "0.1.0"
