"""Optimisation loop, metrics log, run manifest and the ablation runner."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .augmentation import KINDS, make_views
from .backends.base import BackendSuite, encode_image, sample_latent, synthesize
from .backends.latent_io import read_latents
from .config import LOSS_KINDS, TrainConfig, to_flat
from .errors import DimensionMismatch, NonFiniteLoss, UnknownVariant, ZeroVector
from .geometry import DEFAULT_TEMPLATES, NORM_FLOOR, cosine_similarity, load_templates, render_prompts
from .losses import (
    TextBank,
    build_direction_set,
    clip_nce_loss,
    identity_loss,
    latent_l2_loss,
    perceptual_loss,
    total_loss,
)
from .tem import TEMMapper, edit_latent, init_params, perturb_final_layers

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss_total", "loss_nce", "loss_l2", "loss_id", "loss_perc", "cos_dir", "wall_ms")
METRICS_FILE = "metrics.tsv"
MANIFEST_FILE = "manifest.json"
FLUSH_EVERY = 50
COLD_START_FALLBACK = 1e-4

# stream tags for seeds derived from master_seed
_INIT, _PERTURB, _LATENT, _SHUFFLE, _EVAL, _COLD = range(6)


def derive_seed(master_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), *map(int, key)]).generate_state(1)[0])


def build_suite(config: TrainConfig) -> BackendSuite:
    b = config.backend
    if b.kind == "toy":
        from .backends.toy import make_toy_suite

        return make_toy_suite(b.seed, b.toy_dims(), identity=b.identity, perceptual=b.perceptual)
    from .backends.adapters import load_real_suite

    return load_real_suite(
        b.clip_path,
        b.generator_path,
        b.identity_path if b.identity else None,
        b.perceptual_path if b.perceptual else None,
        root=b.root,
    )


def prompt_set(config: TrainConfig):
    templates = load_templates(config.templates_file) if config.templates_file else DEFAULT_TEMPLATES
    return render_prompts(config.source_class, templates)


@dataclass
class StepRecord:
    step: int
    loss_total: float
    loss_nce: float
    loss_l2: float
    loss_id: float
    loss_perc: float
    cos_dir: float
    wall_ms: float

    def as_row(self) -> str:
        vals = [str(self.step)] + [repr(float(getattr(self, c))) for c in METRIC_COLUMNS[1:]]
        return "\t".join(vals)


@dataclass
class TrainState:
    config: TrainConfig
    suite: BackendSuite
    params: TEMMapper
    optimizer: torch.optim.Optimizer
    bank: TextBank
    step: int = 0
    cold_start_applied: bool = False
    latents: Optional[np.ndarray] = field(default=None, repr=False)


def make_optimizer(config: TrainConfig, params: TEMMapper) -> torch.optim.Adam:
    return torch.optim.Adam(params.parameters(), lr=config.optimizer.lr, betas=tuple(config.optimizer.betas))


def _load_inverted(config: TrainConfig, suite: BackendSuite) -> np.ndarray:
    codes = read_latents(config.latent_path)
    d = suite.dims
    if codes.shape[1:] != (d.n_latent, d.dim_w) or len(codes) == 0:
        raise DimensionMismatch(
            f"{config.latent_path}: codes of shape {codes.shape[1:]} (N={len(codes)}) "
            f"do not fit ({d.n_latent}, {d.dim_w})"
        )
    return codes


def init_state(config: TrainConfig, suite: Optional[BackendSuite] = None) -> TrainState:
    config.validate()
    suite = suite or build_suite(config)
    params = init_params(derive_seed(config.master_seed, _INIT), suite.dims, zero_init_last=True,
                         use_tem=config.tem, dtype=suite.dtype)
    perturb_final_layers(params, config.init_epsilon, derive_seed(config.master_seed, _PERTURB))
    bank = TextBank.build(suite, config.target_text, prompt_set(config))
    latents = _load_inverted(config, suite) if config.latent_source == "inverted" else None
    return TrainState(config, suite, params, make_optimizer(config, params), bank, latents=latents)


def batch_latents(state: TrainState, step: int) -> torch.Tensor:
    """Latent codes for ``step``; a pure function of (config, step)."""
    cfg = state.config
    if cfg.latent_source == "sampled":
        codes = [sample_latent(state.suite, derive_seed(cfg.master_seed, _LATENT, step, b))
                 for b in range(cfg.batch_size)]
        return torch.stack(codes)
    n = len(state.latents)
    out = []
    for b in range(cfg.batch_size):
        epoch, pos = divmod(step * cfg.batch_size + b, n)
        perm = np.random.default_rng([cfg.master_seed, _SHUFFLE, epoch]).permutation(n)
        out.append(torch.from_numpy(state.latents[perm[pos]].copy()))
    return torch.stack(out).to(state.suite.dtype)


def eval_latents(state: TrainState) -> torch.Tensor:
    cfg = state.config
    if cfg.latent_source == "inverted":
        return torch.from_numpy(state.latents[: cfg.eval_latents].copy()).to(state.suite.dtype)
    seeds = [derive_seed(cfg.master_seed, _EVAL, i) for i in range(cfg.eval_latents)]
    return torch.stack([sample_latent(state.suite, s) for s in seeds])


def direction_cosine(text_direction, delta_i) -> float:
    """cos(dT, dI) diagnostic; 0.0 when the image has not moved."""
    if float(torch.linalg.vector_norm(delta_i)) < NORM_FLOOR:
        return 0.0
    return float(cosine_similarity(text_direction, delta_i))


def _clip_term(state: TrainState, views, src_img, e_src):
    cfg = state.config
    bank = state.bank
    if cfg.loss == "nce":
        ds = build_direction_set(state.suite, bank, src_img, views, src_embedding=e_src)
        return clip_nce_loss(ds, cfg.weights.tau)
    e_views = encode_image(state.suite, views)
    if cfg.loss == "global":
        return (1 - cosine_similarity(e_views, bank.target_embedding)).mean()
    return (1 - cosine_similarity(bank.text_direction, e_views - e_src)).mean()


def _forward(state: TrainState, w: torch.Tensor, step: int):
    cfg = state.config
    suite = state.suite
    weights = cfg.weights
    w_prime = edit_latent(state.params, w, state.bank.target_embedding)
    with torch.no_grad():
        src = synthesize(suite, w)
        e_src = encode_image(suite, src)
    edited = synthesize(suite, w_prime)
    with torch.no_grad():
        e_edit = encode_image(suite, edited)

    facial = cfg.dataset_profile == "facial"
    totals, parts = [], {k: [] for k in ("nce", "l2", "id", "perc", "cos")}
    for b in range(w.shape[0]):
        views = make_views(edited[b], cfg.aug, step, sample_index=b)
        terms = {
            "nce": _clip_term(state, views, src[b], e_src[b]),
            "l2": latent_l2_loss(w[b], w_prime[b]),
        }
        # profile decides which regulariser is ever evaluated
        if facial and weights.lambda_id > 0:
            terms["id"] = identity_loss(suite, edited[b], src[b])
        if not facial and weights.lambda_perc > 0:
            terms["perc"] = perceptual_loss(suite, edited[b], src[b])
        totals.append(total_loss(terms, weights))
        for key in ("nce", "l2", "id", "perc"):
            parts[key].append(float(terms[key].detach()) if key in terms else 0.0)
        parts["cos"].append(direction_cosine(state.bank.text_direction, e_edit[b] - e_src[b]))
    return torch.stack(totals).mean(), parts


def training_step(state: TrainState, batch: torch.Tensor) -> StepRecord:
    """One optimiser update of the mapper parameters on ``batch`` (B, n_latent, dim_w)."""
    cfg = state.config
    t0 = time.perf_counter()
    step = state.step
    try:
        loss, parts = _forward(state, batch, step)
    except ZeroVector:
        # degenerate start: edited image equals the source, so the query direction is zero
        if state.cold_start_applied:
            raise
        eps = cfg.init_epsilon or COLD_START_FALLBACK
        log.info("step %d: zero query direction, perturbing mapper output layers by %g", step, eps)
        perturb_final_layers(state.params, eps, derive_seed(cfg.master_seed, _COLD))
        state.cold_start_applied = True
        loss, parts = _forward(state, batch, step)

    mean = {k: sum(v) / len(v) for k, v in parts.items()}
    record = StepRecord(
        step=step,
        loss_total=float(loss.detach()),
        loss_nce=mean["nce"],
        loss_l2=mean["l2"],
        loss_id=mean["id"],
        loss_perc=mean["perc"],
        cos_dir=mean["cos"],
        wall_ms=0.0,
    )
    if not all(math.isfinite(getattr(record, c)) for c in METRIC_COLUMNS[1:]):
        raise NonFiniteLoss(step, {c: getattr(record, c) for c in METRIC_COLUMNS[1:]})
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    if cfg.record_wall_time:
        record.wall_ms = (time.perf_counter() - t0) * 1000.0
    return record


def write_manifest(state: TrainState, out_dir: Path, resumed_from=None) -> Path:
    cfg = state.config
    manifest = {
        "tool": "cfclip",
        "version": __version__,
        "config": to_flat(cfg),
        "seeds": {
            "master_seed": cfg.master_seed,
            "init_seed": derive_seed(cfg.master_seed, _INIT),
            "perturb_seed": derive_seed(cfg.master_seed, _PERTURB),
            "aug_seed_stream": cfg.aug.seed_stream,
        },
        "backend": {
            "name": state.suite.name,
            "checksum": state.suite.checksum(),
            "dims": state.suite.dims.as_dict(),
        },
        "artifacts": {
            "metrics": METRICS_FILE,
            "checkpoints": "checkpoints",
            "final_checkpoint": "final.cfz",
        },
        "start_step": state.step,
        "resumed_from": str(resumed_from) if resumed_from else None,
    }
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class RunResult:
    final_checkpoint: Path
    records: list[StepRecord]
    state: TrainState


def run(config: TrainConfig, suite: Optional[BackendSuite] = None, *, resume_from=None) -> RunResult:
    """Train from scratch (or from ``resume_from``) and return everything produced."""
    from .checkpoint import load_checkpoint, save_checkpoint

    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from, suite)
        state.config = config if config is not None else state.config
    else:
        state = init_state(config, suite)
    checksum = state.suite.checksum()

    metrics_path = out / METRICS_FILE
    if resume_from is None:
        write_manifest(state, out)
        metrics_path.write_text("\t".join(METRIC_COLUMNS) + "\n", encoding="utf-8")
    elif not (out / MANIFEST_FILE).exists():
        write_manifest(state, out, resumed_from=resume_from)

    records = []
    ckpt_dir = out / "checkpoints"
    with metrics_path.open("a", encoding="utf-8") as fh:
        while state.step < config.iterations:
            record = training_step(state, batch_latents(state, state.step))
            records.append(record)
            fh.write(record.as_row() + "\n")
            if state.step % FLUSH_EVERY == 0:
                fh.flush()
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                ckpt_dir.mkdir(exist_ok=True)
                save_checkpoint(state, ckpt_dir / f"step_{state.step:07d}.cfz")
    final = out / "final.cfz"
    save_checkpoint(state, final)
    if state.suite.checksum() != checksum:
        raise RuntimeError("backend weights changed during training")
    return RunResult(final, records, state)


def train(config: TrainConfig, suite: Optional[BackendSuite] = None, *, resume_from=None) -> Path:
    return run(config, suite, resume_from=resume_from).final_checkpoint


def read_metrics(path) -> list[StepRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines[1:]:
        if not line:
            continue
        cols = line.split("\t")
        out.append(StepRecord(int(cols[0]), *map(float, cols[1:])))
    return out


# ---------------------------------------------------------------- ablation

ABLATION_KEYS = {"loss": LOSS_KINDS, "aug.kind": KINDS, "tem": ("on", "off")}
REPORT_COLUMNS = (
    "variant", "loss", "aug_kind", "tem", "final_cos_dir", "latent_travel",
    "loss_total", "loss_nce", "loss_l2", "loss_id", "loss_perc",
)
TRAILING = 50


def check_variants(variants: Sequence[tuple[str, dict]]) -> None:
    seen = set()
    for name, overrides in variants:
        if not name or name in seen:
            raise UnknownVariant(f"variant names must be unique and non-empty, got {name!r}")
        seen.add(name)
        for key, value in overrides.items():
            if key not in ABLATION_KEYS:
                raise UnknownVariant(f"{name}: unsupported override {key!r} (allowed: {sorted(ABLATION_KEYS)})")
            if str(value) not in ABLATION_KEYS[key]:
                raise UnknownVariant(f"{name}: {key}={value!r} not in {ABLATION_KEYS[key]}")


@torch.no_grad()
def evaluate(state: TrainState) -> dict:
    """Mean cos(dT, dI) and latent travel ||dw|| over the fixed evaluation latents."""
    w = eval_latents(state)
    w_prime = edit_latent(state.params, w, state.bank.target_embedding)
    e_src = encode_image(state.suite, synthesize(state.suite, w))
    e_edit = encode_image(state.suite, synthesize(state.suite, w_prime))
    cos = [direction_cosine(state.bank.text_direction, e_edit[i] - e_src[i]) for i in range(len(w))]
    travel = torch.linalg.vector_norm(w_prime - w, dim=(-2, -1))
    return {"final_cos_dir": sum(cos) / len(cos), "latent_travel": float(travel.mean())}


@dataclass
class AblationReport:
    rows: list[dict]

    def to_tsv(self) -> str:
        lines = ["\t".join(REPORT_COLUMNS)]
        for row in self.rows:
            lines.append("\t".join(
                row[c] if isinstance(row[c], str) else repr(float(row[c])) for c in REPORT_COLUMNS
            ))
        return "\n".join(lines) + "\n"

    def row(self, name: str) -> dict:
        return next(r for r in self.rows if r["variant"] == name)


def run_ablation(base: TrainConfig, variants: Sequence[tuple[str, dict]],
                 suite: Optional[BackendSuite] = None) -> AblationReport:
    """Train every variant from the same master seed; with no variants, train the base alone."""
    check_variants(variants)
    base.validate()
    suite = suite or build_suite(base)
    jobs = list(variants) or [("base", {})]
    rows = []
    for name, overrides in jobs:
        cfg = base.with_overrides(overrides).replace(output_dir=str(Path(base.output_dir) / name))
        log.info("ablation variant %s: %s", name, overrides)
        result = run(cfg, suite)
        tail = result.records[-TRAILING:]
        row = {
            "variant": name,
            "loss": cfg.loss,
            "aug_kind": cfg.aug.kind,
            "tem": "on" if cfg.tem else "off",
            **evaluate(result.state),
        }
        for col in ("loss_total", "loss_nce", "loss_l2", "loss_id", "loss_perc"):
            row[col] = sum(getattr(r, col) for r in tail) / len(tail)
        rows.append(row)
    report = AblationReport(rows)
    Path(base.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(base.output_dir) / "ablation.tsv").write_text(report.to_tsv(), encoding="utf-8")
    return report


def parse_variants(text: str) -> list[tuple[str, dict]]:
    """``name key=value ...`` per line; ``#`` comments and blank lines are skipped."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        name, *pairs = s.split()
        overrides = {}
        for pair in pairs:
            key, sep, value = pair.partition("=")
            if not sep:
                raise UnknownVariant(f"line {lineno}: expected key=value, got {pair!r}")
            overrides[key] = value
        out.append((name, overrides))
    return out
