"""entity-forge: hierarchical entity pseudo-labels from patch feature grids."""

__version__ = "0.1.0"
