"""Meta-learned mirror-descent adaptive control for manipulator-equation systems."""

__version__ = "0.1.0"
