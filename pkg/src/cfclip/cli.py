"""Command-line driver: ``cfclip train | edit | ablate``.

Exit codes: 0 success, 2 configuration / dimension / variant errors,
3 non-finite loss, 1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backends.base import synthesize
from .backends.latent_io import read_latents, write_latents
from .config import load_config, parse_overrides
from .errors import (
    BadDims,
    ConfigError,
    CorruptCheckpoint,
    DimensionMismatch,
    LatentFormatError,
    NonFiniteLoss,
    UnknownVariant,
)
from .tem import edit_latent
from .training import parse_variants, run_ablation, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NONFINITE = 3

log = logging.getLogger("cfclip")


def quantize(img: torch.Tensor) -> np.ndarray:
    """Clamp to [0, 1], scale by 255 and round half away from zero to uint8."""
    x = img.detach().to(torch.float64).clamp(0.0, 1.0).mul(255.0).cpu().numpy()
    return np.floor(x + 0.5).astype(np.uint8)  # x >= 0, so floor(x + .5) rounds half away from zero


def save_png(img: torch.Tensor, path) -> None:
    from PIL import Image

    arr = quantize(img)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def _overrides(args) -> dict:
    flat = parse_overrides(args.set or [])
    if args.seed is not None:
        flat["master_seed"] = str(args.seed)
    if args.out is not None:
        flat["output_dir"] = args.out
    return flat


def cmd_train(config_path, overrides=None, resume: Optional[str] = None) -> int:
    config = load_config(config_path, overrides)
    final = train(config, resume_from=resume)
    print(f"trained {config.iterations} steps; final checkpoint {final}")
    return EXIT_OK


def cmd_edit(checkpoint_path, latents_path, out_dir) -> int:
    from .checkpoint import load_checkpoint

    state = load_checkpoint(checkpoint_path)
    dims = state.suite.dims
    codes = read_latents(latents_path)
    if codes.shape[1:] != (dims.n_latent, dims.dim_w):
        raise DimensionMismatch(
            f"latent file holds ({codes.shape[1]}, {codes.shape[2]}) codes, "
            f"checkpoint expects ({dims.n_latent}, {dims.dim_w})"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    w = torch.from_numpy(codes).to(state.suite.dtype)
    with torch.no_grad():
        w_prime = edit_latent(state.params, w, state.bank.target_embedding)
        src = synthesize(state.suite, w)
        edited = synthesize(state.suite, w_prime)
    for i in range(len(w)):
        save_png(src[i], out / f"src_{i:04d}.png")
        save_png(edited[i], out / f"edit_{i:04d}.png")
    write_latents(out / "edited_latents.cfw", w_prime.numpy())
    print(f"edited {len(w)} latents into {out}")
    return EXIT_OK


def cmd_ablate(config_path, variants_path, overrides=None) -> int:
    config = load_config(config_path, overrides)
    variants = parse_variants(Path(variants_path).read_text(encoding="utf-8"))
    if not variants:
        raise UnknownVariant(f"{variants_path}: no variants listed")
    report = run_ablation(config, variants)
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS,
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cfclip", parents=[common],
                                     description="Text-driven latent editing with contrastive CLIP guidance.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a mapper from a config file")
    p.add_argument("config")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("edit", parents=[common], help="apply a trained mapper to latent codes")
    p.add_argument("checkpoint")
    p.add_argument("latents")
    p.add_argument("out_dir", nargs="?", help="defaults to --out")

    p = sub.add_parser("ablate", parents=[common], help="train every variant and compare")
    p.add_argument("config")
    p.add_argument("variants")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("out", None), ("set", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, _overrides(args), args.resume)
        if args.command == "edit":
            out_dir = args.out_dir or args.out
            if not out_dir:
                parser.error("edit needs an output directory (positional or --out)")
            return cmd_edit(args.checkpoint, args.latents, out_dir)
        return cmd_ablate(args.config, args.variants, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DimensionMismatch, BadDims, LatentFormatError, CorruptCheckpoint) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnknownVariant as exc:
        print(f"unknown variant: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
