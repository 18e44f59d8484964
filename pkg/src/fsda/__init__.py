"""Feature-space multi-source and semi-supervised domain adaptation."""

__version__ = "0.1.0"
