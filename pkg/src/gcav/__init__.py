"""Global concept activation vectors: per-layer CAVs fused into one cross-layer embedding."""

__version__ = "0.1.0"
