"""Numerical laboratory for mean-field control with common noise.

Modules: ``measure`` (empirical measures, Wasserstein distances), ``model``
(coefficients, Hamiltonian, LQ Riccati oracle), ``particle`` (N-particle
simulation), ``bsde`` (regression Monte Carlo for the value BSDEs), ``hjb``
(lifted HJB and measure-derivative PDEs), ``partialobs`` (weighted particles
and the LQG oracle) and ``lab`` (experiments and CLI).
"""

from .measure import EmpiricalMeasure, from_points
from .model import CoefficientSpec, LqParams, hamiltonian, lq_value_oracle, validate_spec
from .noise import NoiseBundle, TimeGrid

__version__ = "0.1.0"

__all__ = [
    "CoefficientSpec",
    "EmpiricalMeasure",
    "LqParams",
    "NoiseBundle",
    "TimeGrid",
    "from_points",
    "hamiltonian",
    "lq_value_oracle",
    "validate_spec",
]
