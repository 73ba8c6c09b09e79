"""Multi-protocol agent messaging, protocol routing and scenario benchmarking."""

__version__ = "0.1.0"
