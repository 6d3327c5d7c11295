"""PointGCN point-cloud classification engine."""

__version__ = "1.0.0"
