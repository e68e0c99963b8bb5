"""Checkpoint directories: ``manifest.json`` plus one f32 little-endian ``params.bin``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .models import (
    DAFFNet,
    MAP,
    Backbone,
    backbone_config_from_dict,
    config_to_dict,
    daffnet_config_from_dict,
    map_config_from_dict,
)
from .schema import AttributeSchema

FORMAT = "daffnet-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _kind(model) -> str:
    if isinstance(model, DAFFNet):
        return "daffnet"
    if isinstance(model, MAP):
        return "map"
    if isinstance(model, Backbone):
        return "backbone"
    raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")


def save_checkpoint(model, path, seed: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    kind = _kind(model)
    state = model.state_dict()
    records = []
    chunks = []
    for name, arr in state.items():
        arr = np.asarray(arr)
        records.append({"name": name, "shape": list(arr.shape), "dtype": "f32"})
        chunks.append(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config_to_dict(model.cfg),
        "schema": model.schema.to_json() if kind != "backbone" else None,
        "seed": int(seed),
        "parameters": records,
    }
    if extra:
        manifest["extra"] = extra
    (path / "params.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"no manifest.json in {path}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} directory")
    return manifest


def _read_state(path: Path, manifest: dict) -> dict:
    records = manifest.get("parameters") or []
    if not records:
        raise CheckpointError("manifest lists no parameters")
    blob = (path / "params.bin").read_bytes()
    state = {}
    offset = 0
    for rec in records:
        if rec.get("dtype") != "f32":
            raise CheckpointError(f"{rec['name']}: unsupported dtype {rec.get('dtype')!r}")
        count = int(np.prod(rec["shape"], dtype=np.int64))
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"{rec['name']}: buffer has {max(len(blob) - offset, 0)} bytes, expected {nbytes}")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=offset)
        state[rec["name"]] = arr.astype(np.float32).reshape(rec["shape"])
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"params.bin has {len(blob) - offset} trailing bytes")
    return state


def load_checkpoint(path, expect_schema: AttributeSchema | None = None):
    """Rebuild the model recorded at ``path`` and load its parameters."""
    path = Path(path)
    manifest = read_manifest(path)
    kind = manifest.get("kind")
    schema = AttributeSchema.from_json(manifest["schema"]) if manifest.get("schema") else None
    if expect_schema is not None and schema != expect_schema:
        raise CheckpointError("checkpoint schema does not match the expected schema")
    rng = np.random.default_rng(0)
    cfg = manifest["config"]
    if kind == "backbone":
        model = Backbone(backbone_config_from_dict(cfg), rng)
    elif kind == "map":
        model = MAP(map_config_from_dict(cfg), schema, rng)
    elif kind == "daffnet":
        model = DAFFNet(daffnet_config_from_dict(cfg), schema, rng)
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    state = _read_state(path, manifest)
    own = model.state_dict()
    if set(own) != set(state):
        extra = sorted(set(state) - set(own))[:3]
        missing = sorted(set(own) - set(state))[:3]
        raise CheckpointError(f"parameter names differ from model: missing {missing}, unexpected {extra}")
    model.load_state_dict(state)
    model.eval()
    return model
