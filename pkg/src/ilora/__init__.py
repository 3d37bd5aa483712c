"""Graph-conditioned low-rank adaptation with Bayesian latent interaction graphs."""

__version__ = "0.1.0"
