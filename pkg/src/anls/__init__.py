"""Anderson Hamiltonian on the 3-torus, stochastic Hartree NLS and mean-field diagnostics.

Modules: spectral (grids, Littlewood-Paley blocks, paraproducts, norms),
noise (white noise, mollifiers, enhancement), anderson (gauges, operator,
spectrum), dynamics (Hartree evolution, energies, probes), manybody
(N-body flow, density matrices, hierarchy), harness (configuration, runs, CLI)
and checks (the verification battery).
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"
