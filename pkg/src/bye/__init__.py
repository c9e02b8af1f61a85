"""Per-scene point-cloud encoders for object association in long-term dynamic scenes."""

__version__ = "0.1.0"
