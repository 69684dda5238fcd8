# msat_music/services/checkpoint_store.py
from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any, Dict

import numpy as np

from .neural_core import FUSION_MODES, ModelConfig, MsatParams

CHECKPOINT_FORMAT = "msat-checkpoint"
CHECKPOINT_VERSION = 1
DTYPE = "<f8"


class CheckpointFormatError(ValueError):
    pass


def params_to_dict(params: MsatParams) -> Dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "fusion": params.fusion,
        "scales": list(params.scales),
        "target_scale": params.target_scale,
        "frozen": sorted(params.frozen),
        "meta": params.meta,
        "parameters": [
            {
                "name": name,
                "group": params.group_of(name),
                "shape": list(arr.shape),
                "dtype": DTYPE,
                # raw little-endian float64, base64
                "data": base64.b64encode(np.ascontiguousarray(arr, dtype=DTYPE).tobytes()).decode("ascii"),
            }
            for name, arr in params.arrays.items()
        ],
    }


def params_from_dict(data: Dict[str, Any]) -> MsatParams:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"not a checkpoint (format={data.get('format')!r})")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {data.get('version')!r}")
    fusion = data.get("fusion")
    if fusion not in FUSION_MODES:
        raise CheckpointFormatError(f"unknown fusion mode {fusion!r}")
    try:
        config = ModelConfig(**data["config"])
        arrays: Dict[str, np.ndarray] = {}
        for entry in data["parameters"]:
            if entry.get("dtype", DTYPE) != DTYPE:
                raise CheckpointFormatError(f"{entry['name']}: unsupported dtype {entry['dtype']!r}")
            shape = tuple(int(n) for n in entry["shape"])
            raw = base64.b64decode(entry["data"])
            arr = np.frombuffer(raw, dtype=DTYPE)
            if arr.size != int(np.prod(shape)):
                raise CheckpointFormatError(f"{entry['name']}: {arr.size} values for shape {shape}")
            arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(f"incomplete checkpoint: {e}") from e

    return MsatParams(
        config=config,
        arrays=arrays,
        fusion=fusion,
        scales=tuple(data.get("scales") or ()),
        target_scale=data.get("target_scale") or "bar",
        frozen=set(data.get("frozen") or ()),
        meta=dict(data.get("meta") or {}),
    )


def save_checkpoint(params: MsatParams, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(params_to_dict(params), indent=1), encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path: Path | str) -> MsatParams:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{path}: {e}") from e
    return params_from_dict(data)
