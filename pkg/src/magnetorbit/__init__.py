"""Magnetic orbits on periodic Fermi surfaces."""
