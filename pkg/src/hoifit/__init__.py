"""Contact-aware 4D hand-object interaction fitting on synthetic scenarios."""

__version__ = "0.1.0"
