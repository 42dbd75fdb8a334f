"""Bayesian low-rank adapters with Kronecker-factored inducing posteriors."""

__version__ = "0.1.0"
