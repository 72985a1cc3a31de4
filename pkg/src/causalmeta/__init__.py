"""Meta-learning with a learned causal-factor representation, on numpy."""

__version__ = "0.1.0"
