"""Trust-ranked PBFT over channel-scoped hash-chained ledgers."""

__version__ = "0.1.0"
