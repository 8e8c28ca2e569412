"""Toy-scale laboratory for gated representation unlearning."""

__version__ = "0.1.0"
