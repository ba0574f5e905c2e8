"""Numerical laboratory for reflected BSDEs with mean-field interaction.

Forward McKean-Vlasov simulation, least-squares Monte Carlo backward
solvers (reflected, penalized, and coupled particle-system variants), a
finite-difference solver for the associated nonlocal obstacle PDE, and the
closed-form oracles the test suite pins everything against.
"""

__version__ = "0.1.0"
