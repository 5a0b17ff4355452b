"""Checkpoint directories: manifest.json plus one little-endian float32 file per tensor."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from tdlab.errors import ValidationError
from tdlab.student import StudentConfig, StudentModel
from tdlab.teacher import TeacherConfig, TeacherModel

FORMAT = "tdlab-checkpoint"
VERSION = 1
_KINDS = {"student": (StudentModel, StudentConfig), "teacher": (TeacherModel, TeacherConfig)}


def _kind(model: nn.Module) -> str:
    for name, (cls, _) in _KINDS.items():
        if isinstance(model, cls):
            return name
    raise ValidationError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model: nn.Module, out_dir: Path, *, seed: int | None = None, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in model.state_dict().items():
        if t.dtype != torch.float32:
            raise ValidationError(f"tensor {name} is {t.dtype}; checkpoints store float32 only")
        data = t.detach().cpu().contiguous().numpy().astype("<f4", copy=False).tobytes()
        fname = f"{name}.f32"
        (out_dir / fname).write_bytes(data)
        entries.append({"name": name, "shape": list(t.shape), "file": fname, "dtype": "<f4",
                        "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": _kind(model),
        "config": asdict(model.config),
        "seed": seed,
        "extra": extra or {},
        "tensors": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out_dir


def read_manifest(path: Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise ValidationError(f"no manifest.json in {path}") from e
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise ValidationError(f"unsupported checkpoint format in {path}")
    return manifest


def load_checkpoint(path: Path) -> nn.Module:
    """Rebuild the model from its manifest; parameters are restored bit-exactly."""
    path = Path(path)
    manifest = read_manifest(path)
    cls, cfg_cls = _KINDS[manifest["kind"]]
    model = cls(cfg_cls(**manifest["config"]))
    state = {}
    for e in manifest["tensors"]:
        raw = (path / e["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ValidationError(f"checksum mismatch for {e['name']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state, strict=True)
    model.eval()
    return model
