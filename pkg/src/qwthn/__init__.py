"""Hybrid tensor-network / variational-circuit adapters for frozen linear layers."""

__version__ = "0.1.0"
