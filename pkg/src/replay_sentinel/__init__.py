"""Replay-attack detection for EV charging telemetry with a TCN autoencoder."""

__version__ = "0.1.0"
