"""Distributed FMM laboratory: partitioning, local essential trees and
sparse exchange protocols over a simulated message-passing network."""

__version__ = "0.1.0"
