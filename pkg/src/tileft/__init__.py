"""Replicated tile runtime with coarse-grained lockstep checkpoint voting."""

__version__ = "0.1.0"
