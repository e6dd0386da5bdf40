"""Trajectory optimization for Lagrangian systems with a shape and a cyclic coordinate."""

from . import app, model, nco, nlp, ocp, trim, turnpike

__version__ = "0.1.0"

__all__ = ["app", "model", "nco", "nlp", "ocp", "trim", "turnpike", "__version__"]
