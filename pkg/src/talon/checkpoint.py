"""Binary checkpoint container.

Layout: b"TLNC", u32 version, u64 header length, UTF-8 JSON header (sorted keys), then
little-endian f32 payloads in header order. Saving the same state twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig

MAGIC = b"TLNC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]  # name -> f32 array
    trainable: dict[str, bool]
    rng: dict = field(default_factory=dict)
    step: int = 0
    extra: dict = field(default_factory=dict)  # run config, build id, anything JSON-serializable


def state_from_model(model, rng: dict | None = None, step: int = 0, extra: dict | None = None) -> ModelState:
    params, trainable = {}, {}
    for name, p in model.named_parameters():
        params[name] = p.detach().cpu().to(torch.float32).numpy().copy()
        trainable[name] = bool(p.requires_grad)
    return ModelState(model.config, params, trainable, dict(rng or {}), step, dict(extra or {}))


def to_bytes(state: ModelState) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in state.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(arr.shape),
                "trainable": state.trainable[name],
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    header = {
        "config": state.config.to_dict(),
        "params": entries,
        "rng": state.rng,
        "step": state.step,
        "extra": state.extra,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def from_bytes(raw: bytes) -> ModelState:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("corrupt checkpoint: truncated prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body = _PREFIX.size + hlen
    if len(raw) < body:
        raise CheckpointError("corrupt checkpoint: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size : body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint: unreadable header") from exc
    payload = raw[body:]
    params, trainable = {}, {}
    for e in header["params"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"corrupt checkpoint: payload for {e['name']} truncated")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * 4 != e["nbytes"]:
            raise CheckpointError(f"corrupt checkpoint: size mismatch for {e['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = arr.astype(np.float32)
        trainable[e["name"]] = bool(e["trainable"])
    expected = sum(e["nbytes"] for e in header["params"])
    if len(payload) != expected:
        raise CheckpointError("corrupt checkpoint: trailing or missing payload bytes")
    return ModelState(
        ModelConfig.from_dict(header["config"]),
        params,
        trainable,
        header.get("rng", {}),
        int(header.get("step", 0)),
        header.get("extra", {}),
    )


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(state))


def load_checkpoint(path: str | Path) -> ModelState:
    return from_bytes(Path(path).read_bytes())


def load_into(model, state: ModelState, prefix: str = "") -> None:
    """Copy parameters (optionally only those under ``prefix``) into ``model``, checking shapes."""
    own = dict(model.named_parameters())
    for name, arr in state.params.items():
        if not name.startswith(prefix):
            continue
        if name not in own:
            raise CheckpointError(f"shape mismatch: unexpected parameter {name}")
        p = own[name]
        if tuple(p.shape) != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    missing = [n for n in own if n.startswith(prefix) and n not in state.params]
    if missing:
        raise CheckpointError(f"shape mismatch: checkpoint lacks {missing[:3]}")


def model_from_state(state: ModelState, config: ModelConfig | None = None):
    from .forecaster import TalonModel

    model = TalonModel(config or state.config)
    load_into(model, state)
    model.eval()
    return model


def import_backbone(model, path: str | Path) -> None:
    """Load only the frozen backbone weights from another checkpoint."""
    load_into(model, load_checkpoint(path), prefix="backbone.")
