"""Training-time structured pruning for gated residual networks."""

__version__ = "0.1.0"
