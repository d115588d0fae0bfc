"""Learning interaction graphs of Hamiltonian lattices from trajectories."""
from .lattice import Kind, LatticeSpec, PhaseState

__version__ = "0.1.0"

__all__ = ["Kind", "LatticeSpec", "PhaseState", "__version__"]
