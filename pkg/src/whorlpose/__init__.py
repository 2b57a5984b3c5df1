"""Tree whorl detection from single-tree laser-scanning point clouds."""

__version__ = "0.1.0"
