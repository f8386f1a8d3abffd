"""cardioml: desk-scale scientific-ML toolkit for cardiac cell/tissue models.

Subpackages follow the pipeline: a minimal dense-network autodiff engine
(`autodiff`), stochastic optimizers (`optim`), full-order solvers and
dataset generators (`fom`), PINN / multifidelity-PINN inverse estimation
(`pinn`), latent-dynamics surrogates (`latent`), Sobol sensitivity and
MCMC calibration (`uq`), metrics and cross-validation (`evaluation`),
and a config-driven experiment CLI (`cli`).
"""

__version__ = "0.1.0"
