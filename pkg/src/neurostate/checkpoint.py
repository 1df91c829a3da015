"""Single-file checkpoint container.

Layout: magic, format version, length-prefixed JSON manifest, then raw
little-endian float32 blocks in the order listed by the manifest.  The
manifest carries the full model config, epoch/step counters, seeds, and
base64 RNG states; blocks carry parameters and optimizer moments.
Serialization is canonical (sorted keys, name-sorted blocks) so saving
identical state twice yields identical bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"NSCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    global_step: int
    seeds: dict
    rng_states: dict[str, bytes]
    params: dict[str, np.ndarray]
    opt_moments: dict[str, np.ndarray]
    opt_steps: dict[str, float]

    @property
    def hash(self) -> str:
        return config_hash(self.config)


def _blocks_in_order(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = [("param." + k, v) for k, v in ckpt.params.items()]
    items += [("opt." + k, v) for k, v in ckpt.opt_moments.items()]
    return sorted(items, key=lambda kv: kv[0])


def save(path: str | Path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the target folder, then rename."""
    path = Path(path)
    blocks = _blocks_in_order(ckpt)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "config_hash": ckpt.hash,
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "seeds": ckpt.seeds,
        "rng": {k: base64.b64encode(v).decode("ascii") for k, v in ckpt.rng_states.items()},
        "opt_steps": ckpt.opt_steps,
        "blocks": [
            {"name": name, "shape": list(arr.shape)} for name, arr in blocks
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        manifest = json.loads(f.read(blob_len).decode("utf-8"))
        params, moments = {}, {}
        for entry in manifest["blocks"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise CheckpointError(f"{path}: truncated block {entry['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
            name = entry["name"]
            if name.startswith("param."):
                params[name[len("param."):]] = arr
            elif name.startswith("opt."):
                moments[name[len("opt."):]] = arr
            else:
                raise CheckpointError(f"{path}: unknown block kind {name}")
    stored_hash = manifest.get("config_hash")
    if stored_hash != config_hash(manifest["config"]):
        raise CheckpointError(f"{path}: config hash mismatch (corrupt manifest)")
    return Checkpoint(
        config=manifest["config"],
        epoch=int(manifest["epoch"]),
        global_step=int(manifest["global_step"]),
        seeds=manifest["seeds"],
        rng_states={k: base64.b64decode(v) for k, v in manifest["rng"].items()},
        params=params,
        opt_moments=moments,
        opt_steps={k: float(v) for k, v in manifest["opt_steps"].items()},
    )


def snapshot_model(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().to(torch.float32).numpy().copy()
        for name, p in model.named_parameters()
    }


def restore_model(model: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    named = dict(model.named_parameters())
    missing = set(named) - set(params)
    extra = set(params) - set(named)
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    with torch.no_grad():
        for name, arr in params.items():
            p = named[name]
            if tuple(p.shape) != arr.shape:
                raise CheckpointError(f"shape mismatch for {name}: {tuple(p.shape)} vs {arr.shape}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))


def snapshot_optimizer(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> tuple[dict, dict]:
    """Extract Adam moments keyed by parameter name."""
    by_param = {id(p): name for name, p in model.named_parameters()}
    moments, steps = {}, {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_param[id(p)]
            moments[name + ".exp_avg"] = state["exp_avg"].detach().cpu().numpy().copy()
            moments[name + ".exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
            steps[name] = float(state["step"])
    return moments, steps


def restore_optimizer(
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    moments: dict[str, np.ndarray],
    steps: dict[str, float],
) -> None:
    named = dict(model.named_parameters())
    for name, step in steps.items():
        if name not in named:
            raise CheckpointError(f"optimizer state for unknown parameter {name}")
        p = named[name]
        optimizer.state[p] = {
            "step": torch.tensor(step, dtype=torch.float32),
            "exp_avg": torch.from_numpy(moments[name + ".exp_avg"].copy()).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(moments[name + ".exp_avg_sq"].copy()).to(p.dtype),
        }
