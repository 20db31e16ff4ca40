"""Stacked multi-scale hierarchical relighting network on a small numpy autodiff engine."""

__version__ = "0.1.0"
