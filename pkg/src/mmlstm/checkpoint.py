"""Checkpoint directories: ``manifest.json`` plus a little-endian float64 blob.

The manifest lists every array (name and shape) in blob order together with
the model dimensions, variant, initialisation, RNG and any run metadata the
caller supplies. Writes go to a temporary directory that is renamed into
place, so a reader never sees a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path

import numpy as np

from .lstm import FORGET_BIAS_INIT, LstmParams
from .multimodal import MultimodalParams
from .numeric import RNG_ALGORITHM

FORMAT = "MMLSTM-CKPT v1"
MANIFEST = "manifest.json"
BLOB = "params.bin"
INIT_DESCRIPTION = f"uniform(-1/sqrt(d_h), 1/sqrt(d_h)) weights; zero biases; b_f = {FORGET_BIAS_INIT}"


class CheckpointError(ValueError):
    pass


def model_arrays(model) -> dict[str, np.ndarray]:
    return model.arrays() if isinstance(model, LstmParams) else model.arrays


def describe(model) -> dict:
    if isinstance(model, LstmParams):
        return {"kind": "single", "variant": "single", "d_x": [model.d_x], "d_h": model.d_h, "K": model.K}
    return {"kind": "multimodal", "variant": model.variant.value, "d_x": list(model.d_xs),
            "d_h": model.d_h, "K": model.K}


def save(path, model, seed: int | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    arrays = model_arrays(model)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    manifest = {
        "format": FORMAT,
        **describe(model),
        "init": INIT_DESCRIPTION,
        "rng": RNG_ALGORITHM,
        "seed": seed,
        "byte_order": "little",
        "dtype": "float64",
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
    }
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / BLOB).write_bytes(blob)
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if path.exists():
        old = path.with_name(path.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return path


def read_manifest(path) -> dict:
    try:
        manifest = json.loads((Path(path) / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} checkpoint")
    return manifest


def load(path):
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    manifest = read_manifest(path)
    blob = (Path(path) / BLOB).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: blob checksum mismatch")
    arrays, offset = {}, 0
    for entry in manifest["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64)) * 8
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: blob truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, "<f8", count=n // 8, offset=offset).astype(np.float64).reshape(entry["shape"])
        offset += n
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes in blob")
    if manifest["kind"] == "single":
        model = LstmParams(**arrays)
    else:
        model = MultimodalParams(manifest["variant"], tuple(manifest["d_x"]), manifest["d_h"], manifest["K"], arrays)
    return model, manifest
