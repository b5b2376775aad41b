"""SFG1 feature exporter and synthetic data generator for entity-forge."""

__version__ = "0.1.0"
