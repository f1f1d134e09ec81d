"""Vector algebra in the joint text-image embedding space.

Embeddings are plain 1-D torch tensors. Every function accepts anything
``torch.as_tensor`` understands, keeps autograd history intact and returns
tensors, so the same helpers are used by the losses and by the tests.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .errors import BadTemplate, DimensionMismatch, ZeroVector

NORM_FLOOR = 1e-12

DEFAULT_TEMPLATES = (
    "a photo of a {}.",
    "an image of a {}.",
    "a picture of a {}.",
    "a cropped photo of a {}.",
    "a close-up photo of a {}.",
    "a good photo of a {}.",
    "a photo of one {}.",
    "a bright photo of a {}.",
)


def as_vector(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)
    if t.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D embedding, got shape {tuple(t.shape)}")
    return t


def _check_same_length(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"length {a.shape[-1]} != {b.shape[-1]}")


def _norm(a: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.vector_norm(a, dim=-1)
    if bool((n.detach() < NORM_FLOOR).any()):
        raise ZeroVector("vector norm below 1e-12")
    return n


def cosine_similarity(a, b) -> torch.Tensor:
    """Cosine of the angle between ``a`` and ``b`` (broadcasts over leading dims)."""
    a = a if isinstance(a, torch.Tensor) else as_vector(a)
    b = b if isinstance(b, torch.Tensor) else as_vector(b)
    _check_same_length(a, b)
    a, b = torch.broadcast_tensors(*_promote(a, b))
    return (a * b).sum(-1) / (_norm(a) * _norm(b))


def normalize(a) -> torch.Tensor:
    a = a if isinstance(a, torch.Tensor) else as_vector(a)
    return a / _norm(a).unsqueeze(-1)


def _promote(a: torch.Tensor, b: torch.Tensor):
    dtype = torch.promote_types(a.dtype, b.dtype)
    return a.to(dtype), b.to(dtype)


@dataclass
class Direction:
    """``target - source`` in embedding space, with provenance labels."""

    values: torch.Tensor
    source_tag: str = ""
    target_tag: str = ""

    def __len__(self) -> int:
        return self.values.shape[-1]


def direction(src, dst, source_tag: str = "", target_tag: str = "") -> Direction:
    src = as_vector(src)
    dst = as_vector(dst)
    _check_same_length(src, dst)
    src, dst = _promote(src, dst)
    return Direction(dst - src, source_tag, target_tag)


@dataclass(frozen=True)
class PromptSet:
    class_token: str
    templates: tuple[str, ...]
    rendered: tuple[str, ...] = field(default=())

    @property
    def canonical(self) -> str:
        return self.rendered[0]


def _placeholder_count(template: str) -> int:
    try:
        parsed = list(string.Formatter().parse(template))
    except ValueError as exc:
        raise BadTemplate(f"unparseable template {template!r}: {exc}") from None
    count = 0
    for _, name, spec, conv in parsed:
        if name is None:
            continue
        if name != "" or spec or conv:
            raise BadTemplate(f"template {template!r} may only use the bare '{{}}' placeholder")
        count += 1
    return count


def render_prompts(class_token: str, templates: Sequence[str] = DEFAULT_TEMPLATES) -> PromptSet:
    if not class_token:
        raise BadTemplate("class token must be non-empty")
    templates = tuple(templates)
    if not templates:
        raise BadTemplate("at least one template is required")
    for t in templates:
        n = _placeholder_count(t)
        if n != 1:
            raise BadTemplate(f"template {t!r} has {n} placeholders, expected 1")
    rendered = tuple(t.format(class_token) for t in templates)
    return PromptSet(class_token, templates, rendered)


def load_templates(path) -> tuple[str, ...]:
    """Read one template per line (UTF-8); blank lines are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    templates = tuple(line.rstrip("\r") for line in lines if line.strip())
    for t in templates:
        n = _placeholder_count(t)
        if n != 1:
            raise BadTemplate(f"{path}: template {t!r} has {n} placeholders, expected 1")
    return templates
