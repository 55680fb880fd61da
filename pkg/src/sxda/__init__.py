"""Self-cross dilated attention video enhancer for low-light clips."""

__version__ = "0.1.0"
