"""Run configuration and its flat ``section.key = value`` text form.

A config file is UTF-8 text, one ``key = value`` per line; ``#`` starts a
comment line and blank lines are ignored. Keys are the dotted paths printed
by :func:`to_flat`; every key can be overridden on the command line with
``--set key=value``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from .augmentation import KINDS, AugmentationConfig
from .backends.base import Dims
from .errors import ConfigError
from .losses import LossWeights

PROFILES = ("facial", "non_facial")
LOSS_KINDS = ("nce", "global", "directional")
LATENT_SOURCES = ("sampled", "inverted")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "toy"
    seed: int = 0
    dim_clip: int = 16
    dim_w: int = 8
    n_latent: int = 4
    height: int = 16
    width: int = 16
    channels: int = 3
    identity: bool = True
    perceptual: bool = True
    clip_path: Optional[str] = None
    generator_path: Optional[str] = None
    identity_path: Optional[str] = None
    perceptual_path: Optional[str] = None
    root: Optional[str] = None

    def toy_dims(self) -> Dims:
        return Dims(self.dim_clip, self.dim_w, self.n_latent, self.height, self.width, self.channels)


@dataclass(frozen=True)
class TrainConfig:
    target_text: str = "green lipstick"
    source_class: str = "face"
    dataset_profile: str = "facial"
    latent_source: str = "sampled"
    latent_path: Optional[str] = None
    loss: str = "nce"
    tem: bool = True
    weights: LossWeights = field(default_factory=LossWeights.facial)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    iterations: int = 50_000
    batch_size: int = 2
    master_seed: int = 0
    checkpoint_every: int = 5_000
    output_dir: str = "runs/default"
    init_epsilon: float = 1e-4
    templates_file: Optional[str] = None
    eval_latents: int = 8
    record_wall_time: bool = False

    def validate(self) -> "TrainConfig":
        if not self.target_text:
            raise ConfigError("target_text", "must be non-empty")
        if not self.source_class:
            raise ConfigError("source_class", "must be non-empty")
        if self.dataset_profile not in PROFILES:
            raise ConfigError("dataset_profile", f"must be one of {PROFILES}")
        if self.dataset_profile == "facial" and self.weights.lambda_perc != 0:
            raise ConfigError("weights.lambda_perc", "must be 0 for the facial profile")
        if self.dataset_profile == "non_facial" and self.weights.lambda_id != 0:
            raise ConfigError("weights.lambda_id", "must be 0 for the non_facial profile")
        if self.latent_source not in LATENT_SOURCES:
            raise ConfigError("latent_source", f"must be one of {LATENT_SOURCES}")
        if self.latent_source == "inverted" and not self.latent_path:
            raise ConfigError("latent_path", "required when latent_source = inverted")
        if self.loss not in LOSS_KINDS:
            raise ConfigError("loss", f"must be one of {LOSS_KINDS}")
        if self.optimizer.kind != "adam":
            raise ConfigError("optimizer.kind", "only 'adam' is supported")
        if not self.optimizer.lr > 0:
            raise ConfigError("optimizer.lr", "must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")
        if self.init_epsilon < 0:
            raise ConfigError("init_epsilon", "must be >= 0")
        if self.eval_latents < 1:
            raise ConfigError("eval_latents", "must be >= 1")
        if self.backend.kind not in ("toy", "real"):
            raise ConfigError("backend.kind", "must be 'toy' or 'real'")
        if self.backend.kind == "real":
            for key in ("clip_path", "generator_path"):
                if not getattr(self.backend, key):
                    raise ConfigError(f"backend.{key}", "required for real backends")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: Mapping[str, str]) -> "TrainConfig":
        flat = to_flat(self)
        flat.update({k: str(v) for k, v in overrides.items()})
        return from_flat(flat, apply_profile_defaults=False)


_SECTIONS = {"weights": LossWeights, "aug": AugmentationConfig, "optimizer": OptimizerConfig,
             "backend": BackendConfig}


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def to_flat(config: TrainConfig) -> dict[str, str]:
    flat = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = _format(getattr(value, sub.name))
        else:
            flat[f.name] = _format(value)
    return flat


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, annotation: str, text: str) -> Any:
    text = text.strip()
    try:
        if annotation.startswith("Optional"):
            return text or None
        if annotation == "bool":
            return _parse_bool(text)
        if annotation == "int":
            return int(text)
        if annotation == "float":
            return float(text)
        if annotation.startswith("tuple"):
            parts = [float(p) for p in text.split(",")]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated numbers")
            return tuple(parts)
        return text
    except ValueError as exc:
        raise ConfigError(key, f"bad value {text!r}: {exc}") from None


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


def from_flat(flat: Mapping[str, str], *, apply_profile_defaults: bool = True) -> TrainConfig:
    top_types = _field_types(TrainConfig)
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, text in flat.items():
        head, _, tail = key.partition(".")
        if tail:
            if head not in _SECTIONS:
                raise ConfigError(key, "unknown key")
            types = _field_types(_SECTIONS[head])
            if tail not in types:
                raise ConfigError(key, "unknown key")
            sections[head][tail] = _coerce(key, types[tail], text)
        else:
            if key not in top_types or key in _SECTIONS:
                raise ConfigError(key, "unknown key")
            top[key] = _coerce(key, top_types[key], text)

    profile = top.get("dataset_profile", "facial")
    if apply_profile_defaults and profile == "non_facial":
        sections["weights"] = {**{"lambda_id": 0.0, "lambda_perc": 0.01}, **sections["weights"]}
    built = {}
    for name, cls in _SECTIONS.items():
        try:
            built[name] = cls(**sections[name])
        except (TypeError, ValueError) as exc:
            named = [k for k in sections[name] if k in str(exc)]
            raise ConfigError(f"{name}.{named[0]}" if named else name, str(exc)) from None
    if built["aug"].kind not in KINDS:
        raise ConfigError("aug.kind", f"must be one of {KINDS}")
    return TrainConfig(**top, **built).validate()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, sep, value = s.partition("=")
        if not sep or not key.strip():
            raise ConfigError(s, f"{source}:{lineno}: expected 'key = value'")
        flat[key.strip()] = value.strip()
    return flat


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(item, "override must look like key=value")
        out[key.strip()] = value.strip()
    return out


def load_config(path, overrides: Optional[Mapping[str, str]] = None) -> TrainConfig:
    flat = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
    flat.update(overrides or {})
    return from_flat(flat)


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(config).items())
