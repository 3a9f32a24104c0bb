from app.sampler.diagnostics import degenerate_parameters, ess_bulk, ess_mean, mcse_mean, split_rhat
from app.sampler.hmc import PosteriorDraws, hamiltonian, leapfrog, run_hmc

__all__ = [
    "PosteriorDraws",
    "degenerate_parameters",
    "ess_bulk",
    "ess_mean",
    "hamiltonian",
    "leapfrog",
    "mcse_mean",
    "run_hmc",
    "split_rhat",
]
