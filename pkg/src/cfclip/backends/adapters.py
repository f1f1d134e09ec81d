"""Adapters around real pretrained checkpoints.

Nothing here is imported by the toy path; heavy dependencies
(``transformers``, ``torchvision``) are imported lazily.

Generator and identity checkpoints are TorchScript archives with a small
contract, so any StyleGAN / ArcFace port can be exported to them:

generator
    ``forward(ws: (B, num_ws, w_dim)) -> (B, 3, R, R)`` in ``[-1, 1]`` with
    noise already fixed (constant noise mode); an exported
    ``mapping(z: (B, z_dim)) -> (B, w_dim)`` method returning the truncated-
    free W code; integer attributes ``z_dim``, ``w_dim``, ``num_ws``,
    ``img_resolution``.
identity
    ``forward(x: (B, 3, 112, 112))`` in ``[-1, 1]`` returning a face embedding.
"""
from __future__ import annotations

import os
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import BackendFailure
from .base import BackendSuite, Dims

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VGG19_RELU5_2 = 32  # features[:32] ends with relu5_2

BACKEND_DIR_ENV = "CFCLIP_BACKEND_DIR"


def resolve_checkpoint(path, root=None) -> Path:
    """Relative paths resolve against ``root`` or ``$CFCLIP_BACKEND_DIR``."""
    p = Path(path).expanduser()
    if not p.is_absolute():
        base = root or os.environ.get(BACKEND_DIR_ENV)
        if base:
            p = Path(base).expanduser() / p
    if not p.exists():
        raise BackendFailure(f"checkpoint not found: {p}")
    return p


def _to_nchw3(img):
    x = img.movedim(-1, -3)
    if x.shape[-3] == 1:
        x = x.expand(*x.shape[:-3], 3, *x.shape[-2:])
    return x.reshape(-1, 3, *x.shape[-2:])


def _normalize(x, mean, std):
    m = torch.tensor(mean, dtype=x.dtype).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - m) / s


def clip_preprocess(img, size):
    """Bicubic resize of the short side to ``size``, centre crop, CLIP normalisation."""
    x = _to_nchw3(img)
    h, w = x.shape[-2:]
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    x = F.interpolate(x, size=(nh, nw), mode="bicubic", align_corners=False)
    top, left = (nh - size) // 2, (nw - size) // 2
    x = x[..., top:top + size, left:left + size]
    return _normalize(x, CLIP_MEAN, CLIP_STD)


class _ClipText(nn.Module):
    def __init__(self, model, tokenizer):
        super().__init__()
        self.model = model
        self.tokenizer = tokenizer

    def forward(self, prompts):
        tokens = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        out = self.model.get_text_features(input_ids=tokens["input_ids"],
                                           attention_mask=tokens.get("attention_mask"))
        return getattr(out, "pooler_output", out)


class _ClipImage(nn.Module):
    exact_dims = False

    def __init__(self, model):
        super().__init__()
        self.model = model
        self.size = model.config.vision_config.image_size

    def forward(self, img):
        lead = img.shape[:-3]
        x = clip_preprocess(img, self.size).to(self.model.dtype)
        out = self.model.get_image_features(pixel_values=x)
        out = getattr(out, "pooler_output", out)
        return out.reshape(*lead, out.shape[-1])


def load_clip(path=None, *, model=None, tokenizer=None):
    """Return (text_encoder, image_encoder) from a ``transformers`` CLIP checkpoint directory."""
    if model is None:
        from transformers import CLIPModel, CLIPTokenizer

        model = CLIPModel.from_pretrained(str(path))
        tokenizer = tokenizer or CLIPTokenizer.from_pretrained(str(path))
    if tokenizer is None:
        raise BackendFailure("a tokenizer is required with an explicit CLIP model")
    model.eval()
    return _ClipText(model, tokenizer), _ClipImage(model)


class ScriptedGenerator(nn.Module):
    def __init__(self, module):
        super().__init__()
        self.net = module
        try:
            self.z_dim = int(module.z_dim)
            self.w_dim = int(module.w_dim)
            self.num_ws = int(module.num_ws)
            self.resolution = int(module.img_resolution)
        except AttributeError as exc:
            raise BackendFailure(f"generator archive lacks required attribute: {exc}") from exc

    def mapping(self, z):
        return self.net.mapping(z.reshape(1, -1)).reshape(-1)

    def forward(self, w):
        lead = w.shape[:-2]
        img = self.net(w.reshape(-1, self.num_ws, self.w_dim))
        img = (img + 1) / 2
        img = img.movedim(-3, -1)
        return img.reshape(*lead, *img.shape[1:])


class ScriptedIdentity(nn.Module):
    """Face-recognition embedding with the usual aligned-face crop (256 -> crop -> 112)."""

    exact_dims = False

    def __init__(self, module):
        super().__init__()
        self.net = module

    def forward(self, img):
        lead = img.shape[:-3]
        x = _to_nchw3(img) * 2 - 1
        x = F.adaptive_avg_pool2d(x, (256, 256))
        x = x[:, :, 35:223, 32:220]
        x = F.adaptive_avg_pool2d(x, (112, 112))
        out = self.net(x)
        return out.reshape(*lead, out.shape[-1])


class VGGRelu52(nn.Module):
    exact_dims = False

    def __init__(self, state_dict_path=None, features=None):
        super().__init__()
        if features is None:
            from torchvision.models import vgg19

            net = vgg19(weights=None)
            if state_dict_path is not None:
                net.load_state_dict(torch.load(state_dict_path, map_location="cpu", weights_only=True))
            features = net.features
        self.features = features[:VGG19_RELU5_2]

    def forward(self, img):
        lead = img.shape[:-3]
        x = _normalize(_to_nchw3(img), IMAGENET_MEAN, IMAGENET_STD)
        y = self.features(x)
        return y.reshape(*lead, *y.shape[1:])


def load_real_suite(clip_path, generator_path, identity_path=None, perceptual_path=None,
                    *, root=None) -> BackendSuite:
    try:
        text, image = load_clip(resolve_checkpoint(clip_path, root))
        generator = ScriptedGenerator(torch.jit.load(str(resolve_checkpoint(generator_path, root)), map_location="cpu"))
        ident = None
        if identity_path:
            ident = ScriptedIdentity(torch.jit.load(str(resolve_checkpoint(identity_path, root)), map_location="cpu"))
        perc = VGGRelu52(resolve_checkpoint(perceptual_path, root)) if perceptual_path else None
    except BackendFailure:
        raise
    except Exception as exc:
        raise BackendFailure(f"failed to load backends: {exc}") from exc
    return suite_from_members(text, image, generator, ident, perc, name=f"real({generator_path})")


def suite_from_members(text, image, generator, ident=None, perc=None, *, name="real") -> BackendSuite:
    dim_clip = int(text.model.config.projection_dim)
    dims = Dims(
        dim_clip=dim_clip,
        dim_w=generator.w_dim,
        n_latent=generator.num_ws,
        height=generator.resolution,
        width=generator.resolution,
        channels=3,
    )
    return BackendSuite(text, image, generator, dims, ident, perc, name=name, dtype=torch.float32)
