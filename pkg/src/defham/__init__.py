"""Particle simulation of Hamiltonian measure flows with speed-proportional mass loss."""

__version__ = "0.1.0"
