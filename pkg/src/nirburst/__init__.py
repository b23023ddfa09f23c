"""Neural image representations for burst fusion and layer separation."""

__version__ = "0.1.0"
