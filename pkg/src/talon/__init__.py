"""Heterogeneous-expert, prompt-aligned patch forecaster over a frozen decoder-only transformer."""

__version__ = "0.1.0"
