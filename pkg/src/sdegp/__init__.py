"""Symbolic discovery of stochastic differential equations.

Genetic programming over drift/diffusion expression pairs with a
Gaussian transition-likelihood objective, a Kramers-Moyal +
sparse-regression baseline, simulators for the benchmark systems, and
an evaluation/reporting harness.
"""

__version__ = "0.1.0"

from . import evaluation, evolution, expr, fitness, kmsr, simulate  # noqa: F401
