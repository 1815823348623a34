"""Hierarchical federated anomaly detection over simulated IoMT telemetry."""

__version__ = "0.1.0"
