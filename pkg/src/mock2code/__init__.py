"""Mockup-to-code pipeline: grouping, code generation, refinement, metrics."""

__version__ = "0.1.0"
