"""Backdoor poisoning and anti-backdoor learning on a small NumPy MLP."""

__version__ = "0.1.0"
