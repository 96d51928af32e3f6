"""Checkpoint serialization.

Format: one line of compact JSON (config, layer origins, frozen flags,
tensor names and shapes, format version) terminated by a newline, followed
by raw little-endian float32 blobs in the header-declared order. In-memory
float64 values are rounded to float32 on save and widened back on load.

Writes go to a temp file in the target directory and are renamed into
place, so a killed writer never leaves a partial checkpoint visible under
its final name.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .model import LayerState, Model, ModelConfig, UNIT_NAMES
from .tensor import Tensor

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _tensor_order(model: Model) -> list[tuple[str, Tensor]]:
    return list(model.named_params())


def save_model(model: Model, path: str) -> str:
    """Write the checkpoint atomically; returns the file's sha256 hex digest."""
    header = {
        "format": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "layers": [
            {"origin": l.origin, "source": l.source,
             "frozen": l.frozen, "masked": l.masked}
            for l in model.layers
        ],
        "tensors": [
            {"name": name, "shape": list(t.shape), "trainable": t.requires_grad}
            for name, t in _tensor_order(model)
        ],
    }
    payload = bytearray(canonical_json(header).encode("utf-8"))
    payload += b"\n"
    for _, t in _tensor_order(model):
        payload += t.data.astype("<f4").tobytes()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(bytes(payload)).hexdigest()


def load_model(path: str) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad header ({e})") from e
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")

    config = ModelConfig(**header["config"])
    config.validate()

    offset = nl + 1
    tensors: dict[str, Tensor] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated blob for {spec['name']}")
        data = np.frombuffer(blob[offset:end], dtype="<f4").astype(np.float64)
        tensors[spec["name"]] = Tensor(data.reshape(shape),
                                       requires_grad=bool(spec["trainable"]))
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    layers = []
    for i, meta in enumerate(header["layers"]):
        params = {u: tensors[f"layers.{i}.{u}"] for u in UNIT_NAMES}
        layers.append(LayerState(
            params=params, origin=meta["origin"], source=meta["source"],
            frozen=meta["frozen"], masked=meta["masked"]))
    return Model(
        config=config,
        token_embedding=tensors["token_embedding"],
        layers=layers,
        final_norm=tensors["final_norm"],
        lm_head=tensors.get("lm_head"))


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(obj, path: str) -> str:
    """Canonical JSON written atomically; returns sha256 of the bytes."""
    data = (canonical_json(obj) + "\n").encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()
