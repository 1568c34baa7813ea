"""Learned warm starts for gradient-free MPC on waypoint racetracks."""

__version__ = "0.1.0"
