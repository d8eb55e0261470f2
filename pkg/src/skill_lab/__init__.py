"""Cluster-aware layer distillation with structured pruning on a toy speech SSL model."""

__version__ = "0.1.0"
