"""Multi-modal bi-temporal change detection with a numpy autograd engine."""

__version__ = "0.1.0"
