"""stream4d: desk-scale detector data streaming with electron counting."""

__version__ = "0.1.0"
