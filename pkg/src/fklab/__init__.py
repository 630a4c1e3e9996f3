"""Numerical laboratory for multiplicative ergodicity of kick-forced systems.

The package is organised around one object of study: the Markov family
generated by ``u_k = S(u_{k-1}) + eta_k`` and the tilted (Feynman-Kac)
semigroup it induces for a bounded Lipschitz potential.  Exact finite-state
realizations live in :mod:`fklab.kernel_lab`, measure distances in
:mod:`fklab.measure_metrics`, the simulated dynamics in
:mod:`fklab.rds_core` / :mod:`fklab.dynamics_maps`, Monte Carlo estimators in
:mod:`fklab.feynman_kac`, the coupling construction in
:mod:`fklab.coupling_lab`, and downstream statistics plus the command line
interface in :mod:`fklab.apps` / :mod:`fklab.cli`.
"""

__version__ = "0.1.0"
