"""Conditional diffusion super-resolution.

A small x0-predicting diffusion model conditioned on a pre-super-resolved
image, trained on an L1 objective and sampled with a deterministic
implicit (DDIM-style) reverse process.
"""

__version__ = "0.1.0"
