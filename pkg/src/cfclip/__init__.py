"""Text-driven latent editing with contrastive CLIP-space guidance."""

__version__ = "0.1.0"
