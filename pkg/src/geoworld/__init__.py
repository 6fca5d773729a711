"""World models of tabular MDPs with geometric latent priors."""

__version__ = "0.1.0"
