"""Groupwise diffeomorphic atlas construction by coordinate descent.

Builds an unbiased atlas from a population of 3D volumes, propagates atlas
labels back to subjects, and synthesises new shapes from a PCA model of the
registration velocities.
"""

__version__ = "0.1.0"
