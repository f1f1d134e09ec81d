"""Deterministic, differentiable stand-ins for the pretrained networks.

Every weight is drawn from a single seeded torch generator, so two suites
built with the same seed and dims are bitwise identical. The maps are small
enough that the whole pipeline trains on a laptop CPU in seconds.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .base import BackendSuite, Dims

N_BYTES = 256
LATENT_SCALE = 0.1
ENCODER_GAIN = 2.0
WINDOW = 0.15        # encoder window std as a fraction of the image side
BACKGROUND = -2.0    # generator pre-activation offset: dark scenes, so zero fill blends in


def _randn(gen, *shape, scale=1.0, dtype=torch.float64):
    return torch.randn(*shape, generator=gen, dtype=torch.float64).mul_(scale).to(dtype)


def byte_histogram(prompt: str) -> torch.Tensor:
    counts = torch.zeros(N_BYTES, dtype=torch.float64)
    data = torch.tensor(list(prompt.encode("utf-8")), dtype=torch.long)
    counts.index_add_(0, data, torch.ones(len(data), dtype=torch.float64))
    return counts


class ToyTextEncoder(nn.Module):
    """Linear map over the byte histogram of the UTF-8 prompt."""

    def __init__(self, dim_clip, gen, dtype=torch.float64):
        super().__init__()
        self.weight = nn.Parameter(_randn(gen, dim_clip, N_BYTES, scale=1 / math.sqrt(N_BYTES), dtype=dtype))

    def forward(self, prompts):
        hist = torch.stack([byte_histogram(p) for p in prompts]).to(self.weight.dtype)
        return hist @ self.weight.T


def smooth_patterns(n: int, dims: Dims, gen, base: int = 4, window: float = WINDOW,
                    zero_mean: bool = True) -> torch.Tensor:
    """``n`` unit-norm pixel patterns: bilinear upsampled ``base x base`` noise under a
    centred Gaussian window, optionally with the windowed mean removed.

    Smooth, centre-weighted filters make a linear encoder respond to
    geometric warps (and to zero-filled borders) far less than white-noise
    filters would, which is the property the augmented views rely on.
    """
    coarse = torch.randn(n, dims.channels, base, base, generator=gen, dtype=torch.float64)
    pat = F.interpolate(coarse, size=(dims.height, dims.width), mode="bilinear", align_corners=False)
    yy, xx = torch.meshgrid(torch.arange(dims.height, dtype=torch.float64),
                            torch.arange(dims.width, dtype=torch.float64), indexing="ij")
    cy, cx = (dims.height - 1) / 2, (dims.width - 1) / 2
    sy, sx = window * dims.height, window * dims.width
    win = torch.exp(-((yy - cy) ** 2 / (2 * sy ** 2) + (xx - cx) ** 2 / (2 * sx ** 2)))
    pat = pat * win
    if zero_mean:
        pat = pat - pat.sum(dim=(-2, -1), keepdim=True) / win.sum() * win
    pat = pat / pat.flatten(1).norm(dim=1).view(-1, 1, 1, 1)
    return pat.permute(0, 2, 3, 1).reshape(n, -1)  # HWC flattening order


class ToyImageEncoder(nn.Module):
    """Bias-free linear map over flattened pixels with smooth spatial filters."""

    def __init__(self, dims: Dims, gen, gain: float = ENCODER_GAIN, dtype=torch.float64):
        super().__init__()
        self.weight = nn.Parameter((gain * smooth_patterns(dims.dim_clip, dims, gen)).to(dtype))

    def forward(self, img):
        return img.flatten(-3) @ self.weight.T


def layer_resolutions(n_latent: int, size: int) -> list[int]:
    """Coarse-to-fine render size per latent row, ending at full resolution."""
    return [max(2, min(size, round(size * 2.0 ** -(n_latent - 1 - k)))) for k in range(n_latent)]


class ToyGenerator(nn.Module):
    """Per-layer linear renderer: row k paints a low-res image that is upsampled and summed.

    Rows later in the code render at higher resolution, mimicking the
    coarse/medium/fine layout of a style-based synthesis network. Per-layer
    noise images are frozen buffers, so synthesis is a pure function of w.

    ``latent_scale`` sets the typical size of W codes; the render weights are
    scaled by its inverse, so it changes how far a code must travel for a
    given image change without changing the images themselves.
    """

    def __init__(self, dims: Dims, gen, latent_scale: float = LATENT_SCALE, dtype=torch.float64):
        super().__init__()
        self.dims = dims
        self.z_dim = dims.dim_w
        self.latent_scale = latent_scale
        dw = dims.dim_w
        self.map1 = nn.Linear(dw, dw, dtype=dtype)
        self.map2 = nn.Linear(dw, dw, dtype=dtype)
        with torch.no_grad():
            for lin in (self.map1, self.map2):
                lin.weight.copy_(_randn(gen, dw, dw, scale=1 / math.sqrt(dw)))
                lin.bias.copy_(_randn(gen, dw, scale=0.1))
        hs = layer_resolutions(dims.n_latent, dims.height)
        ws = layer_resolutions(dims.n_latent, dims.width)
        self.sizes = list(zip(hs, ws))
        self.render = nn.ParameterList()
        for k, (h, w) in enumerate(self.sizes):
            scale = 1 / (math.sqrt(dw) * latent_scale)
            self.render.append(nn.Parameter(_randn(gen, dims.channels * h * w, dw, scale=scale, dtype=dtype)))
            self.register_buffer(f"noise{k}", _randn(gen, dims.channels, h, w, scale=0.05, dtype=dtype))
        bias = _randn(gen, dims.channels, dims.height, dims.width, scale=0.1, dtype=dtype) + BACKGROUND
        self.register_buffer("bias", bias)

    def mapping(self, z):
        return self.latent_scale * self.map2(F.leaky_relu(self.map1(z), 0.2))

    def layer_contributions(self, w):
        """Pre-activation image painted by each latent row, ``(..., n_latent, C, H, W)``."""
        d = self.dims
        lead = w.shape[:-2]
        flat = w.reshape(-1, d.n_latent, d.dim_w)
        out = []
        for k, (h, wd) in enumerate(self.sizes):
            small = (flat[:, k] @ self.render[k].T).reshape(-1, d.channels, h, wd)
            small = small + getattr(self, f"noise{k}")
            if (h, wd) != (d.height, d.width):
                small = F.interpolate(small, size=(d.height, d.width), mode="bilinear", align_corners=False)
            out.append(small)
        return torch.stack(out, 1).reshape(*lead, d.n_latent, d.channels, d.height, d.width)

    def forward(self, w):
        pre = self.layer_contributions(w).sum(-4) + self.bias
        return torch.sigmoid(pre).movedim(-3, -1)


class ToyIdentityNet(nn.Module):
    def __init__(self, dims: Dims, gen, dim_id=8, dtype=torch.float64):
        super().__init__()
        n_pix = dims.height * dims.width * dims.channels
        self.weight = nn.Parameter(_randn(gen, dim_id, n_pix, scale=1 / math.sqrt(n_pix), dtype=dtype))

    def forward(self, img):
        return img.flatten(-3) @ self.weight.T


class ToyPerceptualNet(nn.Module):
    """Strided linear feature extractor: non-overlapping ``stride x stride`` patches."""

    def __init__(self, dims: Dims, gen, n_features=4, stride=2, dtype=torch.float64):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(
            _randn(gen, n_features, dims.channels, stride, stride,
                   scale=1 / math.sqrt(dims.channels * stride * stride), dtype=dtype)
        )

    def forward(self, img):
        lead = img.shape[:-3]
        x = img.movedim(-1, -3).reshape(-1, *img.shape[-1:], *img.shape[-3:-1])
        y = F.conv2d(x, self.weight, stride=self.stride)
        return y.reshape(*lead, *y.shape[1:])


def make_toy_suite(seed: int = 0, dims: Dims | None = None, *, identity: bool = True,
                   perceptual: bool = True, dtype=torch.float64) -> BackendSuite:
    dims = (dims or Dims()).validate()
    gen = torch.Generator().manual_seed(int(seed))
    text = ToyTextEncoder(dims.dim_clip, gen, dtype)
    image = ToyImageEncoder(dims, gen, dtype=dtype)
    generator = ToyGenerator(dims, gen, dtype=dtype)
    # always draw optional members so toggling them never shifts the other weights
    ident = ToyIdentityNet(dims, gen, dtype=dtype)
    perc = ToyPerceptualNet(dims, gen, dtype=dtype)
    return BackendSuite(
        text_encoder=text,
        image_encoder=image,
        generator=generator,
        dims=dims,
        identity_net=ident if identity else None,
        perceptual_net=perc if perceptual else None,
        name=f"toy(seed={seed})",
        dtype=dtype,
    )
