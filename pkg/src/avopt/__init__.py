"""Multi-person avatar-guided pose optimization from multi-view video."""

__version__ = "0.1.0"
