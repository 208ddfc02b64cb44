"""Control-plane traffic synthesis with a small decoder-only transformer."""

__version__ = "0.1.0"
