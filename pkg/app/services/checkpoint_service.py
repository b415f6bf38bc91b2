"""
Checkpoint persistence: a JSON manifest plus a little-endian float32 blob.

Blob layout follows manifest entry order; each entry records its name,
shape and byte offset. Optimizer momentum is stored as extra entries named
``momentum/<param>``.
"""
import json
import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from app.models.config import FORMAT_VERSION, HeadVariant, ModelConfig
from app.network.params import ParamStore

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f4")
MOMENTUM_PREFIX = "momentum/"


class CheckpointEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0, description="Byte offset into the blob")

    @property
    def count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class CheckpointManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    iteration: int = Field(..., ge=0, description="Next iteration to run")
    seed: int = Field(..., description="Training seed; with iteration it fixes every later random draw")
    dtype: str = BLOB_DTYPE.str
    blob: str
    entries: List[CheckpointEntry]
    model: ModelConfig
    variant: HeadVariant

    @property
    def blob_nbytes(self) -> int:
        return sum(e.count for e in self.entries) * BLOB_DTYPE.itemsize


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    manifest: CheckpointManifest
    params: Dict[str, np.ndarray]
    momentum: Dict[str, np.ndarray] = Field(default_factory=dict)


def _paths(path: str) -> Tuple[str, str]:
    stem = path[:-5] if path.endswith(".json") else path
    return stem + ".json", stem + ".bin"


def save_checkpoint(
    path: str,
    params: Dict[str, np.ndarray],
    iteration: int,
    seed: int,
    model: ModelConfig,
    variant: HeadVariant,
    momentum: Optional[Dict[str, np.ndarray]] = None,
) -> str:
    """Write ``<path>.json`` and ``<path>.bin``; returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    os.makedirs(os.path.dirname(os.path.abspath(manifest_path)), exist_ok=True)

    arrays = list(params.items())
    arrays += [(MOMENTUM_PREFIX + n, v) for n, v in (momentum or {}).items()]
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype=BLOB_DTYPE)
        entries.append(CheckpointEntry(name=name, shape=list(data.shape), offset=offset))
        chunks.append(data.tobytes())
        offset += data.nbytes

    manifest = CheckpointManifest(
        iteration=iteration,
        seed=seed,
        blob=os.path.basename(blob_path),
        entries=entries,
        model=model,
        variant=variant,
    )
    # temp file then rename so an interrupted save never leaves a half blob
    for target, payload, mode in (
        (blob_path, b"".join(chunks), "wb"),
        (manifest_path, manifest.model_dump_json(indent=2), "w"),
    ):
        tmp = target + ".tmp"
        with open(tmp, mode) as f:
            f.write(payload)
        os.replace(tmp, target)
    logger.info(f"✅ Checkpoint saved at iteration {iteration}: {manifest_path}")
    return manifest_path


def load_checkpoint(path: str) -> Checkpoint:
    manifest_path, _ = _paths(path)
    try:
        with open(manifest_path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint manifest {manifest_path}: {e}")
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint {manifest_path} has format_version {version}, expected {FORMAT_VERSION}"
        )
    try:
        manifest = CheckpointManifest(**raw)
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint manifest {manifest_path}: {e}")

    blob_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), manifest.blob)
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint blob {blob_path}: {e}")
    if len(blob) != manifest.blob_nbytes:
        raise CheckpointTruncatedError(
            f"Checkpoint blob {blob_path} has {len(blob)} bytes, manifest expects {manifest.blob_nbytes}"
        )

    params, momentum = {}, {}
    for entry in manifest.entries:
        arr = np.frombuffer(blob, dtype=BLOB_DTYPE, count=entry.count, offset=entry.offset)
        arr = arr.reshape(entry.shape).copy()
        if entry.name.startswith(MOMENTUM_PREFIX):
            momentum[entry.name[len(MOMENTUM_PREFIX):]] = arr
        else:
            params[entry.name] = arr
    return Checkpoint(manifest=manifest, params=params, momentum=momentum)


def restore_params(store: ParamStore, checkpoint: Checkpoint, strict: bool = True) -> None:
    """Copy checkpoint arrays into ``store``; shapes must match exactly."""
    for name, arr in checkpoint.params.items():
        if name not in store:
            if strict:
                raise CheckpointShapeError(f"Checkpoint parameter {name} does not exist in the model")
            continue
        expected = store[name].shape
        if tuple(arr.shape) != tuple(expected):
            raise CheckpointShapeError(
                f"Checkpoint parameter {name} has shape {tuple(arr.shape)}, model expects {tuple(expected)}"
            )
    missing = [n for n in store if n not in checkpoint.params]
    if missing and strict:
        raise CheckpointShapeError(f"Checkpoint is missing parameters: {missing[:5]}")
    store.load_state({n: a for n, a in checkpoint.params.items() if n in store})
