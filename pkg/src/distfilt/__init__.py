"""Centralised, federated and distributed nonlinear filtering over agent networks.

Modules: ``network`` (topologies and combination weights), ``models``
(state-space models), ``filters`` (the three filtering regimes),
``analysis`` (convergence diagnostics), ``harness`` (seeded Monte Carlo
runs) and ``cli``.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
