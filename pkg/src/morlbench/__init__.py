"""Offline multi-objective RL benchmark on a synthetic ICU simulator."""
__version__ = "0.1.0"
