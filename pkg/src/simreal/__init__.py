"""Sim-to-real deformation classification lab.

Generates labeled synthetic images of deformed/intact cans in two visual
domains, trains a content/style disentangling translation network to move
the synthetic images into the real-style domain, and measures how much the
translated data improves a deformation classifier evaluated on the target
domain.
"""

__version__ = "0.1.0"
