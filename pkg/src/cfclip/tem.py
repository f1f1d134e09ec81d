"""The trainable editing network.

A per-layer text mapper projects the target-text embedding into one latent
row per generator layer, a shared fusion layer merges each projected row
with the matching row of ``w``, and a three-group (coarse/medium/fine) latent
mapper turns the fused rows into the residual ``delta_w``.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .backends.base import Dims
from .errors import BadDims, DimensionMismatch

LRELU_SLOPE = 0.2
TEXT_MAPPER_DEPTH = 4
GROUP_DEPTH = 4
# row boundaries of the coarse/medium/fine groups for an 18-layer generator
_REFERENCE_SPLIT = (4, 8, 18)


def group_ranges(n_latent: int) -> list[tuple[int, int]]:
    """Coarse/medium/fine row ranges; 0-3 / 4-7 / 8-17 at 18 layers, scaled otherwise."""
    if n_latent < 3:
        raise BadDims(f"need n_latent >= 3 for three mapper groups, got {n_latent}")
    ref = _REFERENCE_SPLIT[-1]
    coarse = min(max(1, round(n_latent * _REFERENCE_SPLIT[0] / ref)), n_latent - 2)
    medium = min(max(coarse + 1, round(n_latent * _REFERENCE_SPLIT[1] / ref)), n_latent - 1)
    return [(0, coarse), (coarse, medium), (medium, n_latent)]


class RowNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + 1e-8)


def _text_block(dim_clip, dim_w, dtype):
    layers = []
    for i in range(TEXT_MAPPER_DEPTH):
        layers.append(nn.Linear(dim_clip if i == 0 else dim_w, dim_w, dtype=dtype))
        if i < TEXT_MAPPER_DEPTH - 1:
            layers.append(nn.LeakyReLU(LRELU_SLOPE))
    return nn.Sequential(*layers)


def _mapper_group(dim_w, dtype):
    return nn.Sequential(*[
        nn.Sequential(RowNorm(), nn.Linear(dim_w, dim_w, dtype=dtype), nn.LeakyReLU(LRELU_SLOPE))
        for _ in range(GROUP_DEPTH)
    ])


class TEMMapper(nn.Module):
    """All trainable parameters of the editor.

    With ``use_tem=False`` the text mapper and fusion layer are absent and the
    latent mapper consumes ``w`` directly.
    """

    def __init__(self, dims: Dims, use_tem: bool = True, dtype=torch.float64):
        super().__init__()
        self.dims = dims
        self.use_tem = use_tem
        self.ranges = group_ranges(dims.n_latent)
        if use_tem:
            self.text_mapper = nn.ModuleList(
                [_text_block(dims.dim_clip, dims.dim_w, dtype) for _ in range(dims.n_latent)]
            )
            self.fusion = nn.Linear(2 * dims.dim_w, dims.dim_w, dtype=dtype)
        self.latent_mapper = nn.ModuleList([_mapper_group(dims.dim_w, dtype) for _ in range(3)])

    def final_layers(self) -> list[nn.Linear]:
        return [group[-1][1] for group in self.latent_mapper]

    def forward(self, w, e_t):
        return edit_latent(self, w, e_t)


def parameter_count(dims: Dims, use_tem: bool = True) -> int:
    dc, dw, n = dims.dim_clip, dims.dim_w, dims.n_latent
    latent = 3 * GROUP_DEPTH * (dw * dw + dw)
    if not use_tem:
        return latent
    text = n * ((dc * dw + dw) + (TEXT_MAPPER_DEPTH - 1) * (dw * dw + dw))
    fusion = 2 * dw * dw + dw
    return text + fusion + latent


def init_params(seed: int, dims: Dims, zero_init_last: bool = True, *, use_tem: bool = True,
                dtype=torch.float64) -> TEMMapper:
    dims = dims.validate()
    params = TEMMapper(dims, use_tem=use_tem, dtype=dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in params.modules():
            if isinstance(module, nn.Linear):
                fan_in = module.in_features
                w = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
                module.weight.copy_(w)
                module.bias.zero_()
        if zero_init_last:
            for lin in params.final_layers():
                lin.weight.zero_()
                lin.bias.zero_()
    return params


def perturb_final_layers(params: TEMMapper, epsilon: float, seed: int) -> None:
    """Add ``epsilon * N(0, 1)`` to the last layer of every latent-mapper group."""
    if epsilon == 0:
        return
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for lin in params.final_layers():
            for p in (lin.weight, lin.bias):
                noise = torch.randn(p.shape, generator=gen, dtype=torch.float64)
                p.add_(epsilon * noise.to(p.dtype))


def _check_rows(x, dims: Dims, what: str):
    if x.ndim < 2 or tuple(x.shape[-2:]) != (dims.n_latent, dims.dim_w):
        raise DimensionMismatch(f"{what} shape {tuple(x.shape)} != (..., {dims.n_latent}, {dims.dim_w})")


def map_text_embedding(params: TEMMapper, e_t) -> torch.Tensor:
    """Row ``i`` is text-mapper block ``i`` applied to ``e_t``: ``(..., n_latent, dim_w)``."""
    if not params.use_tem:
        raise ValueError("mapper was built without the text-embedding path")
    if e_t.shape[-1] != params.dims.dim_clip:
        raise DimensionMismatch(f"text embedding length {e_t.shape[-1]} != {params.dims.dim_clip}")
    return torch.stack([block(e_t) for block in params.text_mapper], dim=-2)


def fuse(params: TEMMapper, projected, w) -> torch.Tensor:
    _check_rows(projected, params.dims, "projected embedding")
    _check_rows(w, params.dims, "latent")
    projected, w = torch.broadcast_tensors(projected, w)
    return params.fusion(torch.cat([projected, w], dim=-1))


def map_latent(params: TEMMapper, e_f) -> torch.Tensor:
    """Residual ``delta_w``: each row goes through the group that owns its layer."""
    _check_rows(e_f, params.dims, "fused embedding")
    parts = [group(e_f[..., a:b, :]) for group, (a, b) in zip(params.latent_mapper, params.ranges)]
    return torch.cat(parts, dim=-2)


def edit_latent(params: TEMMapper, w, e_t) -> torch.Tensor:
    """``w' = w + delta_w``."""
    _check_rows(w, params.dims, "latent")
    if params.use_tem:
        e_f = fuse(params, map_text_embedding(params, e_t), w)
    else:
        e_f = w
    return w + map_latent(params, e_f)
