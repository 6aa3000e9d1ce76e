"""duraflow: a partitioned, event-sourced workflow engine with a deterministic simulator."""

__version__ = "0.1.0"
