"""Flow-map learning for dynamical systems with hidden parameters."""

__version__ = "0.1.0"
