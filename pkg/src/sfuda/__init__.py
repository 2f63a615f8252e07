"""Source-free domain adaptation with uncertainty-guided pseudo-labels, at desk scale."""

__version__ = "0.1.0"
