"""Inter-frame prediction lab: learned binary motion codes and block matching."""

__version__ = "0.1.0"
