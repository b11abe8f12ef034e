"""Detect the next-best pairwise interaction missing from a Poisson GLM.

A neural network trained on top of the GLM (through its offset) learns the
structure the GLM misses; its weights are scored for pairwise interactions,
and mini-GLMs decide which interaction, in which parametric form, to add.
"""

from . import cann, data, evaluation, glm, nid, selection, tuning

__version__ = "0.1.0"

__all__ = ["cann", "data", "evaluation", "glm", "nid", "selection", "tuning"]
