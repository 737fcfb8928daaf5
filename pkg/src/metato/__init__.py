"""Meta-learned initializations for neural-reparameterized topology optimization."""

__version__ = "0.1.0"
