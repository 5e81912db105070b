"""Multi-session point-cloud map fusion."""
__version__ = "0.1.0"
