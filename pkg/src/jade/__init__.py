"""Joint variational autoencoders for data-scarce classification with an auxiliary dataset."""

from jade.latent import (
    DiagGaussian,
    ElboTerms,
    JadeLoss,
    LatentSplit,
    ObjectiveWeights,
    class_loglik,
    elbo_domain,
    jade_objective,
    kl_between,
    kl_to_standard_normal,
    recon_loglik,
    reparameterize,
)

__version__ = "0.1.0"

__all__ = [
    "DiagGaussian",
    "ElboTerms",
    "JadeLoss",
    "LatentSplit",
    "ObjectiveWeights",
    "class_loglik",
    "elbo_domain",
    "jade_objective",
    "kl_between",
    "kl_to_standard_normal",
    "recon_loglik",
    "reparameterize",
]
