"""Ride-pooling dispatch simulator with graph-attention double-Q learning and exact assignment."""

__version__ = "0.1.0"
