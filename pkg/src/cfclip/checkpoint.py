"""Checkpoint archive: a stored (uncompressed) zip with fixed timestamps.

Members::

    meta.json                      format tag, version, dims, step, config, tensor index
    params/<name>.npy              mapper parameters by state-dict name
    optim/<name>.exp_avg.npy       Adam first moments
    optim/<name>.exp_avg_sq.npy    Adam second moments

Members are written in a fixed order with fixed metadata, so identical
states always serialise to identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backends.base import BackendSuite, Dims
from .config import from_flat, to_flat
from .errors import CorruptCheckpoint
from .losses import TextBank
from .tem import TEMMapper
from .training import TrainState, _load_inverted, build_suite, make_optimizer, prompt_set

FORMAT = "cfclip-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    info.create_system = 3
    zf.writestr(info, data)


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    params = state.params
    names = [n for n, _ in params.named_parameters()]
    opt_state = state.optimizer.state_dict()
    group = {k: v for k, v in opt_state["param_groups"][0].items() if k != "params"}
    group = {k: list(v) if isinstance(v, tuple) else v for k, v in group.items()}
    per_param = opt_state["state"]

    moments = {}
    steps = {}
    step_dtype = "torch.float32"
    for idx, name in enumerate(names):
        st = per_param.get(idx)
        if st:
            moments[name] = (st["exp_avg"], st["exp_avg_sq"])
            steps[name] = float(st["step"])
            step_dtype = str(st["step"].dtype)

    meta = {
        "format": FORMAT,
        "version": VERSION,
        "dims": params.dims.as_dict(),
        "use_tem": params.use_tem,
        "step": state.step,
        "cold_start_applied": state.cold_start_applied,
        "config": to_flat(state.config),
        "params": [{"name": n, "shape": list(p.shape), "dtype": str(p.dtype)} for n, p in params.named_parameters()],
        "optimizer": {"group": group, "steps": steps, "step_dtype": step_dtype},
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode("utf-8"))
        for name, p in params.named_parameters():
            _write_member(zf, f"params/{name}.npy", _npy_bytes(p))
        for name in names:
            if name in moments:
                m1, m2 = moments[name]
                _write_member(zf, f"optim/{name}.exp_avg.npy", _npy_bytes(m1))
                _write_member(zf, f"optim/{name}.exp_avg_sq.npy", _npy_bytes(m2))
    tmp.replace(path)
    return path


def _read_npy(zf: zipfile.ZipFile, member: str, failures: list) -> Optional[np.ndarray]:
    try:
        return np.load(io.BytesIO(zf.read(member)), allow_pickle=False)
    except KeyError:
        failures.append(f"{member}: missing")
    except Exception as exc:
        failures.append(f"{member}: unreadable ({exc})")
    return None


def load_checkpoint(path, suite: Optional[BackendSuite] = None) -> TrainState:
    """Restore a full training state; ``suite`` is rebuilt from the stored config when omitted."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CorruptCheckpoint(path, [f"archive: {exc}"]) from None
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise CorruptCheckpoint(path, ["meta.json: missing"]) from None
        except ValueError as exc:
            raise CorruptCheckpoint(path, [f"meta.json: {exc}"]) from None

        failures = []
        if meta.get("format") != FORMAT:
            failures.append(f"format: expected {FORMAT!r}, got {meta.get('format')!r}")
        if meta.get("version") != VERSION:
            failures.append(f"version: expected {VERSION}, got {meta.get('version')!r}")
        for key in ("dims", "use_tem", "step", "config", "params", "optimizer"):
            if key not in meta:
                failures.append(f"{key}: missing")
        if failures:
            raise CorruptCheckpoint(path, failures)

        try:
            config = from_flat(meta["config"], apply_profile_defaults=False)
            dims = Dims(**meta["dims"])
        except Exception as exc:
            raise CorruptCheckpoint(path, [f"config: {exc}"]) from None
        suite = suite or build_suite(config)
        if suite.dims != dims:
            raise CorruptCheckpoint(path, [f"dims: archive {dims} does not match suite {suite.dims}"])

        params = TEMMapper(dims, use_tem=bool(meta["use_tem"]), dtype=suite.dtype)
        expected = dict(params.named_parameters())
        listed = {e["name"]: e for e in meta["params"]}
        if set(listed) != set(expected):
            failures.append(f"params: names differ from architecture ({sorted(set(listed) ^ set(expected))})")
        tensors = {}
        for name, p in expected.items():
            arr = _read_npy(zf, f"params/{name}.npy", failures)
            if arr is None:
                continue
            if tuple(arr.shape) != tuple(p.shape):
                failures.append(f"params/{name}: shape {arr.shape} != {tuple(p.shape)}")
                continue
            tensors[name] = torch.from_numpy(arr.copy())

        opt_meta = meta["optimizer"]
        moments = {}
        for name in opt_meta.get("steps", {}):
            m1 = _read_npy(zf, f"optim/{name}.exp_avg.npy", failures)
            m2 = _read_npy(zf, f"optim/{name}.exp_avg_sq.npy", failures)
            if m1 is not None and m2 is not None:
                moments[name] = (torch.from_numpy(m1.copy()), torch.from_numpy(m2.copy()))
        if failures:
            raise CorruptCheckpoint(path, failures)

    with torch.no_grad():
        for name, p in expected.items():
            p.copy_(tensors[name])

    optimizer = make_optimizer(config, params)
    names = list(expected)
    group = dict(opt_meta["group"])
    group = {k: tuple(v) if isinstance(v, list) else v for k, v in group.items()}
    group["params"] = list(range(len(names)))
    state_dict = {"state": {}, "param_groups": [group]}
    step_dtype = getattr(torch, opt_meta.get("step_dtype", "torch.float32").rpartition(".")[2])
    for idx, name in enumerate(names):
        if name in moments:
            m1, m2 = moments[name]
            state_dict["state"][idx] = {
                "step": torch.tensor(opt_meta["steps"][name], dtype=step_dtype),
                "exp_avg": m1,
                "exp_avg_sq": m2,
            }
    optimizer.load_state_dict(state_dict)

    bank = TextBank.build(suite, config.target_text, prompt_set(config))
    latents = _load_inverted(config, suite) if config.latent_source == "inverted" else None
    return TrainState(config, suite, params, optimizer, bank, step=int(meta["step"]),
                      cold_start_applied=bool(meta.get("cold_start_applied", False)), latents=latents)
