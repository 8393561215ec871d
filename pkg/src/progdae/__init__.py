"""Diffusion auto-encoder with attribute-conditioned latent shifts.

The package trains a diffusion auto-encoder on 2-D brain slices, learns an
attribute-conditioned shift in a low-dimensional progression subspace of the
semantic latent, and evaluates generated follow-up images against ground
truth on a synthetic longitudinal phantom cohort.
"""

__version__ = "0.1.0"
