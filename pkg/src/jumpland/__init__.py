"""Jump planning, simulation and policy training for a quadruped."""

__version__ = "0.1.0"
