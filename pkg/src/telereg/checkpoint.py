"""Checkpoint directories: a JSON manifest plus one binary blob per tensor.

Blob layout: ``b"TNS1"``, little-endian u32 ``ndim``, ``ndim`` u32 dims, then
the row-major float32 payload. Adam moments are stored the same way so a
run can resume bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .networks import NetConfig, TeleRegModel, build_model

FORMAT = "telereg-checkpoint/1"
BLOB_MAGIC = b"TNS1"


class CheckpointError(RuntimeError):
    pass


def write_blob(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = BLOB_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_blob(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != BLOB_MAGIC:
        raise CheckpointError(f"{path}: bad blob magic {data[:4]!r}")
    (ndim,) = struct.unpack("<I", data[4:8])
    shape = struct.unpack(f"<{ndim}I", data[8 : 8 + 4 * ndim])
    body = data[8 + 4 * ndim :]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(body) != expected:
        raise CheckpointError(f"{path}: expected {expected} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).copy()


def save_checkpoint(out_dir, model: TeleRegModel, optimizer=None, meta: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, value in model.state_dict().items():
        fname = f"tensors/{name}.bin"
        write_blob(out_dir / fname, value.detach().cpu().numpy())
        tensors.append({"name": name, "file": fname, "shape": list(value.shape)})
    manifest = {
        "format": FORMAT,
        "net_config": model.config.to_dict(),
        "width_scale": model.config.width_scale,
        "num_points": model.config.num_points,
        "tensors": tensors,
    }
    manifest.update(meta or {})
    if optimizer is not None:
        manifest["optimizer"] = _save_optimizer(out_dir, model, optimizer)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir


def _save_optimizer(out_dir: Path, model, optimizer) -> dict:
    (out_dir / "optim").mkdir(exist_ok=True)
    entries = []
    step = 0
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        step = int(state["step"])
        files = {}
        for key in ("exp_avg", "exp_avg_sq"):
            fname = f"optim/{name}.{key}.bin"
            write_blob(out_dir / fname, state[key].detach().cpu().numpy())
            files[key] = fname
        entries.append({"name": name, **files})
    return {"step": step, "state": entries}


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"{ckpt_dir}: no manifest.json")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_into(model: TeleRegModel, ckpt_dir, optimizer=None) -> dict:
    """Copy checkpoint tensors into ``model`` (and Adam state into ``optimizer``).

    Raises ``CheckpointError`` naming the first mismatch when the checkpoint
    was written for a different width scale, point count or layout.
    """
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    for key in ("width_scale", "num_points"):
        have = getattr(model.config, key)
        if manifest[key] != have:
            raise CheckpointError(f"checkpoint {key}={manifest[key]} but model expects {have}")
    state = model.state_dict()
    names = {t["name"] for t in manifest["tensors"]}
    if names != set(state):
        missing = sorted(set(state) - names)[:3]
        extra = sorted(names - set(state))[:3]
        raise CheckpointError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    new_state = {}
    for entry in manifest["tensors"]:
        arr = read_blob(ckpt_dir / entry["file"])
        want = tuple(state[entry["name"]].shape)
        if arr.shape != want:
            raise CheckpointError(f"{entry['name']}: shape {arr.shape} in checkpoint, model has {want}")
        new_state[entry["name"]] = torch.from_numpy(arr).to(state[entry["name"]].dtype)
    model.load_state_dict(new_state)
    if optimizer is not None and "optimizer" in manifest:
        params = dict(model.named_parameters())
        opt = manifest["optimizer"]
        for entry in opt["state"]:
            p = params[entry["name"]]
            optimizer.state[p] = {
                "step": torch.tensor(float(opt["step"])),
                "exp_avg": torch.from_numpy(read_blob(ckpt_dir / entry["exp_avg"])).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(read_blob(ckpt_dir / entry["exp_avg_sq"])).to(p.dtype),
            }
    return manifest


def load_model(ckpt_dir) -> tuple[TeleRegModel, dict]:
    manifest = read_manifest(ckpt_dir)
    model = build_model(NetConfig(**manifest["net_config"]))
    load_into(model, ckpt_dir)
    return model, manifest
