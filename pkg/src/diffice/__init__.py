"""Iterative diffusion counterfactuals for image-quality classifiers, at desk scale."""

__version__ = "0.1.0"
