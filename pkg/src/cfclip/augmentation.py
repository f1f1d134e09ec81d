"""Random geometric views of an edited image: perspective, affine and crop-resize.

All warps are inverse maps: for each output pixel centre we compute the
source coordinate and sample it bilinearly. Coordinates are in pixel units
with pixel centres at integers, so identity transforms hit the source
samples exactly. Random parameters come from a numpy ``Generator``; the
pixels stay torch tensors and gradients flow through the sampled values
(never through the random parameters).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BadFraction, DegenerateHomography

KINDS = ("perspective", "affine", "crop_resize", "none")
MAX_HOMOGRAPHY_ATTEMPTS = 5


@dataclass(frozen=True)
class AugmentationConfig:
    kind: str = "perspective"
    distortion_scale: float = 0.5
    n_views: int = 4
    interpolation: str = "bilinear"
    fill_value: float = 0.0
    seed_stream: int = 0
    affine_degrees: float = 15.0
    affine_translate: float = 0.1
    affine_scale: tuple[float, float] = (0.9, 1.1)
    crop_fraction: float = 0.8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0 <= self.distortion_scale <= 1:
            raise ValueError("distortion_scale must lie in [0, 1]")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.interpolation != "bilinear":
            raise ValueError("only bilinear interpolation is supported")
        if not 0 <= self.fill_value <= 1:
            raise ValueError("fill_value must lie in [0, 1]")


def bilinear_sample(img: torch.Tensor, xs, ys, fill: float = 0.0) -> torch.Tensor:
    """Sample ``img`` (H, W, C) at float pixel coordinates; taps outside the image read ``fill``."""
    h, w = img.shape[-3], img.shape[-2]
    xs = torch.as_tensor(xs, dtype=torch.float64)
    ys = torch.as_tensor(ys, dtype=torch.float64)
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    fx = (xs - x0).to(img.dtype).unsqueeze(-1)
    fy = (ys - y0).to(img.dtype).unsqueeze(-1)
    x0 = x0.long()
    y0 = y0.long()
    fill_t = torch.as_tensor(fill, dtype=img.dtype)

    def tap(yi, xi):
        valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).unsqueeze(-1)
        vals = img[..., yi.clamp(0, h - 1), xi.clamp(0, w - 1), :]
        return torch.where(valid, vals, fill_t)

    v00, v01 = tap(y0, x0), tap(y0, x0 + 1)
    v10, v11 = tap(y0 + 1, x0), tap(y0 + 1, x0 + 1)
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def _pixel_grid(h: int, w: int):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return xs, ys


def image_corners(h: int, w: int) -> np.ndarray:
    """Pixel-centre corners in TL, TR, BR, BL order as (x, y)."""
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def homography_coefficients(startpoints, endpoints) -> np.ndarray:
    """Eight coefficients of the projective map sending each endpoint to its startpoint."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((xs, ys), (xe, ye)) in enumerate(zip(startpoints, endpoints)):
        a[2 * i] = [xe, ye, 1, 0, 0, 0, -xs * xe, -xs * ye]
        a[2 * i + 1] = [0, 0, 0, xe, ye, 1, -ys * xe, -ys * ye]
        b[2 * i] = xs
        b[2 * i + 1] = ys
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateHomography(f"singular corner system: {exc}") from None


def _is_convex_quad(pts: np.ndarray, tol: float = 1e-9) -> bool:
    crosses = []
    for i in range(4):
        p, q, r = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        crosses.append((q[0] - p[0]) * (r[1] - q[1]) - (q[1] - p[1]) * (r[0] - q[0]))
    crosses = np.asarray(crosses)
    return bool((crosses > tol).all() or (crosses < -tol).all())


def sample_perspective_corners(h: int, w: int, distortion_scale: float, rng: np.random.Generator):
    """Move each corner inward by up to ``distortion_scale * (W/2, H/2)``."""
    start = image_corners(h, w)
    dx_max = distortion_scale * w / 2
    dy_max = distortion_scale * h / 2
    inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
    for _ in range(MAX_HOMOGRAPHY_ATTEMPTS):
        offsets = np.stack([rng.uniform(0, dx_max, 4), rng.uniform(0, dy_max, 4)], axis=1)
        end = start + inward * offsets
        if _is_convex_quad(end):
            return start, end
    raise DegenerateHomography(
        f"could not draw non-degenerate corners in {MAX_HOMOGRAPHY_ATTEMPTS} attempts"
    )


def warp_perspective(img: torch.Tensor, startpoints, endpoints, fill: float = 0.0) -> torch.Tensor:
    """Warp so that ``startpoints`` of the input land on ``endpoints`` of the output."""
    startpoints = np.asarray(startpoints, dtype=np.float64)
    endpoints = np.asarray(endpoints, dtype=np.float64)
    if np.array_equal(startpoints, endpoints):
        return img.clone()
    c = homography_coefficients(startpoints, endpoints)
    xs, ys = _pixel_grid(img.shape[-3], img.shape[-2])
    denom = c[6] * xs + c[7] * ys + 1
    src_x = (c[0] * xs + c[1] * ys + c[2]) / denom
    src_y = (c[3] * xs + c[4] * ys + c[5]) / denom
    return bilinear_sample(img, src_x, src_y, fill)


def random_perspective(img: torch.Tensor, distortion_scale: float, rng: np.random.Generator,
                       fill: float = 0.0) -> torch.Tensor:
    if not 0 <= distortion_scale <= 1:
        raise ValueError("distortion_scale must lie in [0, 1]")
    if distortion_scale == 0:
        return img.clone()
    start, end = sample_perspective_corners(img.shape[-3], img.shape[-2], distortion_scale, rng)
    return warp_perspective(img, start, end, fill)


def warp_affine(img: torch.Tensor, matrix, translation, fill: float = 0.0) -> torch.Tensor:
    """Apply ``p_out = M (p_in - c) + c + t`` about the image centre ``c``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    tx, ty = (float(v) for v in translation)
    if np.array_equal(matrix, np.eye(2)) and tx == 0 and ty == 0:
        return img.clone()
    h, w = img.shape[-3], img.shape[-2]
    cx, cy = (w - 1) / 2, (h - 1) / 2
    inv = np.linalg.inv(matrix)
    xs, ys = _pixel_grid(h, w)
    ux, uy = xs - cx - tx, ys - cy - ty
    src_x = inv[0, 0] * ux + inv[0, 1] * uy + cx
    src_y = inv[1, 0] * ux + inv[1, 1] * uy + cy
    return bilinear_sample(img, src_x, src_y, fill)


def random_affine(img: torch.Tensor, config: AugmentationConfig, rng: np.random.Generator) -> torch.Tensor:
    """Rotation, whole-pixel translation and isotropic scale, drawn in that order."""
    h, w = img.shape[-3], img.shape[-2]
    deg = config.affine_degrees
    angle = math.radians(rng.uniform(-deg, deg))
    tx = round(rng.uniform(-config.affine_translate * w, config.affine_translate * w))
    ty = round(rng.uniform(-config.affine_translate * h, config.affine_translate * h))
    scale = rng.uniform(*config.affine_scale)
    cos, sin = math.cos(angle), math.sin(angle)
    matrix = scale * np.array([[cos, -sin], [sin, cos]])
    return warp_affine(img, matrix, (tx, ty), config.fill_value)


def crop_resize(img: torch.Tensor, fraction: float, x0: float, y0: float) -> torch.Tensor:
    """Crop a ``fraction``-sized window at pixel offset (x0, y0) and resample it to full size."""
    if not 0 < fraction <= 1:
        raise BadFraction(f"crop fraction must lie in (0, 1], got {fraction}")
    if fraction == 1 and x0 == 0 and y0 == 0:
        return img.clone()
    h, w = img.shape[-3], img.shape[-2]
    xs, ys = _pixel_grid(h, w)
    return bilinear_sample(img, x0 + xs * fraction, y0 + ys * fraction)


def random_crop_resize(img: torch.Tensor, config: AugmentationConfig, rng: np.random.Generator) -> torch.Tensor:
    f = config.crop_fraction
    if not 0 < f <= 1:
        raise BadFraction(f"crop fraction must lie in (0, 1], got {f}")
    h, w = img.shape[-3], img.shape[-2]
    x0 = rng.uniform(0, (1 - f) * (w - 1))
    y0 = rng.uniform(0, (1 - f) * (h - 1))
    return crop_resize(img, f, x0, y0)


def view_rng(seed_stream: int, step: int, view_index: int, sample_index: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed_stream), int(step), int(sample_index), int(view_index)])


def make_views(img: torch.Tensor, config: AugmentationConfig, step: int, sample_index: int = 0) -> torch.Tensor:
    """``n_views`` independently augmented copies of ``img``, stacked on a new leading axis."""
    if config.kind == "none":
        return img.unsqueeze(0).expand(config.n_views, *img.shape).clone()
    views = []
    for v in range(config.n_views):
        rng = view_rng(config.seed_stream, step, v, sample_index)
        if config.kind == "perspective":
            out = random_perspective(img, config.distortion_scale, rng, config.fill_value)
        elif config.kind == "affine":
            out = random_affine(img, config, rng)
        else:
            out = random_crop_resize(img, config, rng)
        views.append(out)
    return torch.stack(views)
