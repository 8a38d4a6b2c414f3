"""Matrix-free IRLS for inverse imaging with sparse and low-rank analysis priors."""

__version__ = "0.1.0"
