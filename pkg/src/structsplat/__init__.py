"""CPU surfel Gaussian splatting with Atlanta-world structural plane priors."""

__version__ = "0.1.0"
