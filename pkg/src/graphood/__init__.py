"""Graph-level out-of-distribution detection with two-view contrastive learning."""

__version__ = "0.1.0"
