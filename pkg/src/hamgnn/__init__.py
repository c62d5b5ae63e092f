"""Graph node embedding along learnable Hamiltonian orbits in phase space."""

__version__ = "0.1.0"
