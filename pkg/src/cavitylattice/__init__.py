"""Quantum and mean-field dynamics of atoms in a pumped optical cavity lattice.

Modules:

* :mod:`cavitylattice.model` holds parameters, the truncated photon/momentum basis and operators.
* :mod:`cavitylattice.bandstructure` computes Bloch bands, Wannier functions and bunching parameters.
* :mod:`cavitylattice.meanfield` solves self-consistency, stability and coupled dynamics.
* :mod:`cavitylattice.mcwf` runs quantum-jump trajectories, ensembles and a density-matrix oracle.
* :mod:`cavitylattice.cli` is the command-line front end.
"""

__version__ = "0.1.0"

from .model import HilbertGeometry, ModelParams, QuantumState  # noqa: E402

__all__ = ["HilbertGeometry", "ModelParams", "QuantumState", "__version__"]
