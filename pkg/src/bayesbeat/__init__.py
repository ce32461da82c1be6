"""Variational 1-D CNNs for atrial-fibrillation detection from PPG with uncertainty scoring."""

__version__ = "0.1.0"
