"""Rotation-aware registration of EBSD orientation maps."""
