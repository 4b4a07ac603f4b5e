"""Multi-scale change captioning for bitemporal image pairs, built on a small numpy autodiff."""

__version__ = "0.1.0"
