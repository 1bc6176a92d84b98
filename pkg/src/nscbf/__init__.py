"""Neural control barrier function synthesis under input limits."""

__version__ = "0.1.0"
