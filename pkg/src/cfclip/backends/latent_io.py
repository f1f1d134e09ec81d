"""Reading and writing latent-code files.

Binary layout (all little-endian)::

    b"CFW+"  u32 n_latent  u32 dim_w  float32[N * n_latent * dim_w]

The payload holds ``N >= 0`` codes back to back, each row-major. ``N`` is
implied by the payload length.

Text layout, for codes exported by inversion tools::

    CFW+TXT <n_latent> <dim_w>
    <dim_w whitespace-separated floats>      # one line per latent row
    ...

After the header, blank lines and lines starting with ``#`` are ignored;
the number of rows must be a multiple of ``n_latent``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import LatentFormatError

MAGIC = b"CFW+"
TEXT_MAGIC = "CFW+TXT"
_HEADER = struct.Struct("<4sII")


def write_latents(path, codes, *, text: bool = False) -> None:
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim == 2:
        codes = codes[None]
    if codes.ndim != 3:
        raise LatentFormatError(f"expected (N, n_latent, dim_w) codes, got shape {codes.shape}")
    _, n_latent, dim_w = codes.shape
    path = Path(path)
    if text:
        lines = [f"{TEXT_MAGIC} {n_latent} {dim_w}"]
        for code in codes:
            lines.extend(" ".join(repr(float(v)) for v in row) for row in code)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return
    payload = codes.astype("<f4").tobytes(order="C")
    path.write_bytes(_HEADER.pack(MAGIC, n_latent, dim_w) + payload)


def read_latents(path) -> np.ndarray:
    """Return codes as a ``(N, n_latent, dim_w)`` float32 array."""
    raw = Path(path).read_bytes()
    # the text magic extends the binary one, so test it first
    if raw.startswith(TEXT_MAGIC.encode()):
        return _parse_text(raw.decode("utf-8"), path)
    if raw.startswith(MAGIC):
        return _parse_binary(raw, path)
    raise LatentFormatError(f"{path}: unrecognised latent file (bad magic)")


def _parse_binary(raw: bytes, path) -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise LatentFormatError(f"{path}: truncated header")
    _, n_latent, dim_w = _HEADER.unpack_from(raw)
    if n_latent < 1 or dim_w < 1:
        raise LatentFormatError(f"{path}: invalid dims {n_latent}x{dim_w}")
    body = raw[_HEADER.size:]
    per_code = 4 * n_latent * dim_w
    if len(body) % per_code:
        raise LatentFormatError(f"{path}: payload of {len(body)} bytes is not a whole number of codes")
    arr = np.frombuffer(body, dtype="<f4").astype(np.float32)
    arr = arr.reshape(-1, n_latent, dim_w)
    if not np.isfinite(arr).all():
        raise LatentFormatError(f"{path}: non-finite values")
    return arr


def _parse_text(text: str, path) -> np.ndarray:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 3 or head[0] != TEXT_MAGIC:
        raise LatentFormatError(f"{path}: header must be '{TEXT_MAGIC} <n_latent> <dim_w>'")
    try:
        n_latent, dim_w = int(head[1]), int(head[2])
    except ValueError:
        raise LatentFormatError(f"{path}: non-integer dims in header") from None
    if n_latent < 1 or dim_w < 1:
        raise LatentFormatError(f"{path}: invalid dims {n_latent}x{dim_w}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            row = [float(v) for v in s.split()]
        except ValueError:
            raise LatentFormatError(f"{path}:{lineno}: non-numeric value") from None
        if len(row) != dim_w:
            raise LatentFormatError(f"{path}:{lineno}: expected {dim_w} values, got {len(row)}")
        rows.append(row)
    if len(rows) % n_latent:
        raise LatentFormatError(f"{path}: {len(rows)} rows is not a multiple of n_latent={n_latent}")
    arr = np.asarray(rows, dtype=np.float32).reshape(-1, n_latent, dim_w)
    if not np.isfinite(arr).all():
        raise LatentFormatError(f"{path}: non-finite values")
    return arr
