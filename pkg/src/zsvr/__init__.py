"""Zero-shot temporal consistency toolkit for diffusion-based video restoration.

Desk-scale implementation: hierarchical latent warping, hybrid flow-guided
spatial-aware token merging, a deterministic toy latent-diffusion sampler with
hook surfaces, optical-flow utilities, temporal-consistency metrics, and a CLI.
"""

__version__ = "0.1.0"
