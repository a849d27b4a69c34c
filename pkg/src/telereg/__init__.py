"""Joint registration and completion of partial point-cloud pairs."""

__version__ = "0.1.0"
