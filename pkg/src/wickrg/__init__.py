"""Operator renormalization group for a nonrelativistic electron coupled to photons at fixed momentum."""
__version__ = "0.1.0"
