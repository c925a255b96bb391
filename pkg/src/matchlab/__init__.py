"""Neural subgraph matching over a configurable design space."""

__version__ = "0.1.0"
