"""Multi-frame face model learning: graph-based identity model, photometric fitting, evaluation."""
__version__ = "0.1.0"
