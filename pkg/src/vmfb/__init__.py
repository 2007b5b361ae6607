"""Variable metric forward-backward splitting with extended relaxation."""
__version__ = "0.1.0"
