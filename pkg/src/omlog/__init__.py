"""Online anomaly detection over log streams with drift-gated meta-updates."""

__version__ = "0.1.0"
