"""Random walks in random potential: energies, recovering cocycles, semi-infinite polymer measures and shapes."""

__version__ = "0.1.0"

from . import busemann, energy, errors, gibbs, harness, instances, lattice, shape  # noqa: E402,F401

__all__ = ["busemann", "energy", "errors", "gibbs", "harness", "instances", "lattice", "shape", "__version__"]
