"""Round-by-round dialogue tuning with role-separated low-rank adapters."""

__version__ = "0.1.0"
