"""Hard-sphere dynamics of correlations: exact flows, cumulant algebra,
reduced-function quadrature and kinetic solvers."""

__version__ = "0.1.0"
