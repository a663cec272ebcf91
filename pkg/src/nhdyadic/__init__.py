"""Dyadic-cube machinery on finite metric measure spaces.

Builds nested separated nets and half-open dyadic cube systems, runs the
tagged randomization of the cube centers with good/bad classification,
computes adapted b-martingale Haar decompositions, and evaluates
Calderon-Zygmund kernel quantities (matrix elements, BMO/RBMO/WBP
estimators, paraproducts, adjacent-cube splittings) on desk-scale fixtures.
"""

__version__ = "0.1.0"

from . import dyadic, martingale, operators, randgrid, space, streams

__all__ = ["space", "dyadic", "randgrid", "martingale", "operators", "streams", "__version__"]
