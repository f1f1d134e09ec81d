"""Frozen backend suite and the operations the training loop calls on it.

Images are ``(H, W, C)`` tensors with values in ``[0, 1]``; every member also
accepts leading batch dimensions, i.e. ``(..., H, W, C)``. Latent codes are
``(n_latent, dim_w)`` matrices, again with optional leading batch dims.
"""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from ..errors import BackendFailure, BadDims, CFClipError, DimensionMismatch, MissingBackend


@dataclass(frozen=True)
class Dims:
    dim_clip: int = 16
    dim_w: int = 8
    n_latent: int = 4
    height: int = 16
    width: int = 16
    channels: int = 3

    def validate(self, min_image: int = 2) -> "Dims":
        for name in ("dim_clip", "dim_w", "n_latent"):
            if getattr(self, name) < 2:
                raise BadDims(f"{name} must be >= 2, got {getattr(self, name)}")
        if self.height < min_image or self.width < min_image:
            raise BadDims(f"image dims must be >= {min_image}, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise BadDims(f"channels must be 1 or 3, got {self.channels}")
        return self

    def as_dict(self) -> dict:
        return {
            "dim_clip": self.dim_clip,
            "dim_w": self.dim_w,
            "n_latent": self.n_latent,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
        }


@contextlib.contextmanager
def _wrap_failures(what: str):
    try:
        yield
    except CFClipError:
        raise
    except Exception as exc:  # adapter internals may raise anything
        raise BackendFailure(f"{what} failed: {exc}") from exc


def _freeze(module: Optional[nn.Module]) -> None:
    if module is None:
        return
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


@dataclass
class BackendSuite:
    """Bundle of frozen networks sharing one joint embedding space."""

    text_encoder: nn.Module
    image_encoder: nn.Module
    generator: nn.Module
    dims: Dims
    identity_net: Optional[nn.Module] = None
    perceptual_net: Optional[nn.Module] = None
    name: str = "suite"
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        for m in self.members().values():
            _freeze(m)

    def members(self) -> dict:
        out = {
            "text_encoder": self.text_encoder,
            "image_encoder": self.image_encoder,
            "generator": self.generator,
        }
        if self.identity_net is not None:
            out["identity_net"] = self.identity_net
        if self.perceptual_net is not None:
            out["perceptual_net"] = self.perceptual_net
        return out

    def checksum(self) -> str:
        """SHA-256 over every parameter and buffer of every member."""
        h = hashlib.sha256()
        for name, module in self.members().items():
            h.update(name.encode())
            state = module.state_dict()
            for key in sorted(state):
                t = state[key]
                if not isinstance(t, torch.Tensor):
                    continue
                h.update(key.encode())
                h.update(str(t.dtype).encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _check_image(suite: BackendSuite, img: torch.Tensor) -> None:
    d = suite.dims
    expected = (d.height, d.width, d.channels)
    if tuple(img.shape[-3:]) != expected:
        raise DimensionMismatch(f"image shape {tuple(img.shape[-3:])} != suite dims {expected}")


def _check_latent(suite: BackendSuite, w: torch.Tensor) -> None:
    d = suite.dims
    if w.ndim < 2 or tuple(w.shape[-2:]) != (d.n_latent, d.dim_w):
        raise DimensionMismatch(
            f"latent shape {tuple(w.shape)} incompatible with ({d.n_latent}, {d.dim_w})"
        )


def encode_text(suite: BackendSuite, prompt) -> torch.Tensor:
    """Embed one prompt (returns ``(dim_clip,)``) or a list of prompts (``(N, dim_clip)``)."""
    single = isinstance(prompt, str)
    prompts = [prompt] if single else list(prompt)
    if not prompts or any(not p for p in prompts):
        raise ValueError("prompts must be non-empty strings")
    with _wrap_failures("encode_text"), torch.no_grad():
        out = suite.text_encoder(prompts)
    return out[0] if single else out


def encode_image(suite: BackendSuite, img: torch.Tensor) -> torch.Tensor:
    if getattr(suite.image_encoder, "exact_dims", True):
        _check_image(suite, img)
    with _wrap_failures("encode_image"):
        return suite.image_encoder(img)


def synthesize(suite: BackendSuite, w: torch.Tensor) -> torch.Tensor:
    _check_latent(suite, w)
    with _wrap_failures("synthesize"):
        return suite.generator(w)


def sample_latent(suite: BackendSuite, seed: int) -> torch.Tensor:
    """Draw ``z ~ N(0, I)`` with ``seed``, map it to W and broadcast to every layer."""
    gen = torch.Generator().manual_seed(int(seed))
    with _wrap_failures("sample_latent"), torch.no_grad():
        z = torch.randn(suite.generator.z_dim, generator=gen, dtype=torch.float64)
        w = suite.generator.mapping(z.to(suite.dtype))
    d = suite.dims
    if w.shape[-1] != d.dim_w:
        raise BackendFailure(f"mapping network returned width {w.shape[-1]}, expected {d.dim_w}")
    return w.reshape(1, d.dim_w).expand(d.n_latent, d.dim_w).clone()


def identity_embed(suite: BackendSuite, img: torch.Tensor) -> torch.Tensor:
    if suite.identity_net is None:
        raise MissingBackend("suite has no identity network; lambda_id must be 0")
    if getattr(suite.identity_net, "exact_dims", True):
        _check_image(suite, img)
    with _wrap_failures("identity_embed"):
        return suite.identity_net(img)


def perceptual_features(suite: BackendSuite, img: torch.Tensor) -> torch.Tensor:
    if suite.perceptual_net is None:
        raise MissingBackend("suite has no perceptual network; lambda_perc must be 0")
    if getattr(suite.perceptual_net, "exact_dims", True):
        _check_image(suite, img)
    with _wrap_failures("perceptual_features"):
        return suite.perceptual_net(img)
