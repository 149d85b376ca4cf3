"""Slot-memory attention bottleneck (KEM / sKEM) for multi-task learning, with its verification harness."""

__version__ = "0.1.0"
