"""Region-text pseudo label pipeline: annotate, filter, analyze, convert."""

__version__ = "0.1.0"
