"""Particle solvers for discounted infinite-horizon mean field FBSDEs and their Lions derivatives."""

__version__ = "0.1.0"
