"""Objective terms: global and directional CLIP losses, the contrastive direction loss and the regularisers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import torch

from .backends.base import BackendSuite, encode_image, encode_text, identity_embed, perceptual_features
from .errors import DimensionMismatch, MissingTerm, ZeroVector
from .geometry import NORM_FLOOR, Direction, PromptSet, cosine_similarity, normalize


@dataclass(frozen=True)
class LossWeights:
    lambda_nce: float = 0.3
    lambda_l2: float = 0.8
    lambda_id: float = 0.2
    lambda_perc: float = 0.0
    tau: float = 0.1

    def __post_init__(self):
        for name in ("lambda_nce", "lambda_l2", "lambda_id", "lambda_perc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @classmethod
    def facial(cls, **overrides) -> "LossWeights":
        return cls(**{"lambda_nce": 0.3, "lambda_l2": 0.8, "lambda_id": 0.2, "lambda_perc": 0.0, **overrides})

    @classmethod
    def non_facial(cls, **overrides) -> "LossWeights":
        return cls(**{"lambda_nce": 0.3, "lambda_l2": 0.8, "lambda_id": 0.0, "lambda_perc": 0.01, **overrides})


@dataclass
class DirectionSet:
    """Contrastive directions for one source image.

    ``query`` is ``(V, D)`` (one row per augmented view), ``negatives`` is
    ``(J, D)`` (one row per source template); the positives are ``(D,)``.
    """

    query: torch.Tensor
    pos_text: torch.Tensor
    pos_image: torch.Tensor
    negatives: torch.Tensor

    def __post_init__(self):
        if self.query.ndim == 1:
            self.query = self.query.unsqueeze(0)
        if self.negatives.ndim == 1:
            self.negatives = self.negatives.unsqueeze(0)
        if self.query.shape[0] < 1 or self.negatives.shape[0] < 1:
            raise ValueError("need at least one query and one negative direction")
        d = self.pos_text.shape[-1]
        for name in ("query", "pos_image", "negatives"):
            if getattr(self, name).shape[-1] != d:
                raise DimensionMismatch(f"{name} has length {getattr(self, name).shape[-1]}, expected {d}")


@dataclass
class TextBank:
    """Text embeddings that stay constant for a whole run."""

    target: str
    prompts: PromptSet
    target_embedding: torch.Tensor
    source_embeddings: torch.Tensor  # (J, D), template order

    @classmethod
    def build(cls, suite: BackendSuite, target: str, prompts: PromptSet) -> "TextBank":
        return cls(target, prompts, encode_text(suite, target), encode_text(suite, list(prompts.rendered)))

    @property
    def canonical_source(self) -> torch.Tensor:
        return self.source_embeddings[0]

    @property
    def text_direction(self) -> torch.Tensor:
        return self.target_embedding - self.canonical_source


def global_clip_loss(img_emb, txt_emb) -> torch.Tensor:
    return 1 - cosine_similarity(img_emb, txt_emb)


def directional_clip_loss(delta_t, delta_i) -> torch.Tensor:
    # Tensor also has a ``values`` attribute, so test the type explicitly
    delta_t = delta_t.values if isinstance(delta_t, Direction) else delta_t
    delta_i = delta_i.values if isinstance(delta_i, Direction) else delta_i
    return 1 - cosine_similarity(delta_t, delta_i)


def build_direction_set(suite: BackendSuite, bank: TextBank, src_image, views,
                        src_embedding: Optional[torch.Tensor] = None) -> DirectionSet:
    """Assemble query / positives / negatives for one source image and its augmented edits."""
    if not isinstance(views, torch.Tensor):
        views = torch.stack(list(views))
    if views.ndim == 3:
        views = views.unsqueeze(0)
    if views.shape[0] < 1:
        raise ValueError("need at least one augmented view")
    e_src = encode_image(suite, src_image) if src_embedding is None else src_embedding
    e_views = encode_image(suite, views)
    query = e_views - e_src
    norms = torch.linalg.vector_norm(query.detach(), dim=-1)
    if bool((norms < NORM_FLOOR).any()):
        bad = [int(i) for i in torch.nonzero(norms < NORM_FLOOR).flatten()]
        raise ZeroVector(f"query direction is zero for view(s) {bad}: edited view equals the source")
    return DirectionSet(
        query=query,
        pos_text=bank.target_embedding - bank.canonical_source,
        pos_image=bank.target_embedding - e_src,
        negatives=bank.source_embeddings - e_src,
    )


def clip_nce_loss(ds: DirectionSet, tau: float) -> torch.Tensor:
    """InfoNCE with two positives sharing one negative set, averaged over views.

    Every direction is L2-normalised first, so ``tau`` acts on cosines.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    q = normalize(ds.query)
    k_t = normalize(ds.pos_text)
    k_i = normalize(ds.pos_image)
    k_n = normalize(ds.negatives)
    neg = q @ k_n.T / tau
    total = 0
    for k in (k_t, k_i):
        pos = (q @ k / tau).unsqueeze(-1)
        total = total + torch.logsumexp(torch.cat([pos, neg], dim=-1), dim=-1) - pos.squeeze(-1)
    return total.mean()


def latent_l2_loss(w, w_prime) -> torch.Tensor:
    if w.shape != w_prime.shape:
        raise DimensionMismatch(f"latent shapes differ: {tuple(w.shape)} vs {tuple(w_prime.shape)}")
    return torch.linalg.vector_norm(w - w_prime, dim=(-2, -1))


def identity_loss(suite: BackendSuite, edited, source) -> torch.Tensor:
    return 1 - cosine_similarity(identity_embed(suite, edited), identity_embed(suite, source))


def perceptual_loss(suite: BackendSuite, edited, source) -> torch.Tensor:
    """Mean absolute feature difference."""
    diff = perceptual_features(suite, edited) - perceptual_features(suite, source)
    return diff.abs().mean(dim=(-3, -2, -1))


TERM_WEIGHTS = {"nce": "lambda_nce", "l2": "lambda_l2", "id": "lambda_id", "perc": "lambda_perc"}


def total_loss(terms: Mapping[str, object], weights: LossWeights):
    """Weighted sum; terms whose weight is zero may be absent."""
    total = 0.0
    for key, attr in TERM_WEIGHTS.items():
        lam = getattr(weights, attr)
        if lam == 0:
            continue
        value = terms.get(key)
        if value is None:
            raise MissingTerm(f"term {key!r} is required when {attr} = {lam}")
        total = total + lam * value
    return total

