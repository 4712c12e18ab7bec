"""sigmaflow: Riemannian gradient flows of entropic harmonic energies for
probability-simplex-valued fields on the discrete 2-torus, with
state-dependent domain metrics that can be fixed, hand-built from structure
tensors, fitted per node, or predicted by a small learned operator.

Subpackages
-----------
simplex    closed-form Fisher-Rao geometry of the open simplex
grid       torus discretization, metric fields, Laplace-Beltrami assembly
flows      flow right-hand sides, geometric integrators, diagnostics
autodiff   minimal reverse-mode tape used by the learning paths
operator   metric-predicting network, unrolled-flow gradients, optimizers
learning   synthetic scenes, corruption pipeline, fitting and training
fileio     PGM/PPM images, binary field formats, palette rendering
cli        the ``flow`` command-line entry point
"""

from . import (autodiff, errors, fileio, flows, grid, learning, operator,
               simplex)

__all__ = ["autodiff", "errors", "fileio", "flows", "grid", "learning",
           "operator", "simplex"]
__version__ = "0.1.0"
