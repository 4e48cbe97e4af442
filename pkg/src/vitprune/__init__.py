"""Grouped structural pruning of vision transformers, with a
domain-generalisation training/evaluation harness and attention analysis."""

__version__ = "0.1.0"
