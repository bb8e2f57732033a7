"""Differentiable BEV fusion with flow-based alignment and dissolved-query recovery."""

__version__ = "0.1.0"
