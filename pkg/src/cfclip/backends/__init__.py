from .base import (
    BackendSuite,
    Dims,
    encode_image,
    encode_text,
    identity_embed,
    perceptual_features,
    sample_latent,
    synthesize,
)
from .latent_io import read_latents, write_latents
from .toy import make_toy_suite

__all__ = [
    "BackendSuite",
    "Dims",
    "encode_image",
    "encode_text",
    "identity_embed",
    "make_toy_suite",
    "perceptual_features",
    "read_latents",
    "sample_latent",
    "synthesize",
    "write_latents",
]
