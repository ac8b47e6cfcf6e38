"""Branching random walks in the boundary case under killing and selection.

Submodules: ``laws`` (reproduction laws and normalization), ``spine``
(size-biased spine and many-to-one identities), ``walks`` (corridor
confinement), ``curves`` (critical curves and thresholds), ``engine`` (forward
simulation), ``gw`` (Galton-Watson tails) and ``harness`` (CLI and experiments).
"""

__version__ = "0.1.0"
