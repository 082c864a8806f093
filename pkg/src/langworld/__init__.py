"""Language-conditioned multi-task world models on a toy manipulation bench."""

__version__ = "0.1.0"
