"""Versioned single-file checkpoint container.

Byte layout (all integers little endian):

    offset 0   8 bytes   magic ``MRSEQCKP``
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    metadata length L
    offset 20  L bytes   UTF-8 JSON metadata
    offset 20+L          tensor payloads, raw bytes, concatenated

The metadata block carries the full model / preprocess / train configs,
their fingerprints, fold bookkeeping, and a ``tensors`` index of
``{name, dtype, shape, offset, nbytes}`` entries whose offsets are
relative to the payload start. The metadata level of the format is the
interoperability contract; payloads are plain C-order arrays.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptCheckpointError, FingerprintMismatchError
from .models import ModelConfig, build_model
from .preprocess import PreprocessConfig

MAGIC = b"MRSEQCKP"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64, "int32": np.int32}


@dataclass
class CheckpointMeta:
    model_config: ModelConfig
    label_set_id: str
    preprocess_config: PreprocessConfig
    fold_id: int = 0
    best_epoch: int = 0
    best_validation_accuracy: float = 0.0
    train_config: dict = dataclass_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": self.model_config.to_dict(),
            "model_fingerprint": self.model_config.fingerprint(),
            "label_set_id": self.label_set_id,
            "preprocess_config": self.preprocess_config.to_dict(),
            "preprocess_fingerprint": self.preprocess_config.fingerprint(),
            "fold_id": self.fold_id,
            "best_epoch": self.best_epoch,
            "best_validation_accuracy": self.best_validation_accuracy,
            "train_config": self.train_config,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CheckpointMeta":
        return cls(
            model_config=ModelConfig.from_dict(doc["model_config"]),
            label_set_id=doc["label_set_id"],
            preprocess_config=PreprocessConfig.from_dict(doc["preprocess_config"]),
            fold_id=doc.get("fold_id", 0),
            best_epoch=doc.get("best_epoch", 0),
            best_validation_accuracy=doc.get("best_validation_accuracy", 0.0),
            train_config=doc.get("train_config", {}),
        )


def save_checkpoint(model, meta: CheckpointMeta, path, state_dict=None) -> Path:
    """Write model weights (or an explicit state dict) with metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if state_dict is None:
        state_dict = model.state_dict()

    index = []
    payloads = []
    offset = 0
    for name, tensor in state_dict.items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        if str(arr.dtype) not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {arr.dtype} for {name}")
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        payloads.append(blob)
        offset += len(blob)

    doc = meta.to_dict()
    doc["tensors"] = index
    meta_bytes = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in payloads:
            fh.write(blob)
    tmp.replace(path)
    return path


def read_metadata(path) -> dict:
    """Parse and validate the header + metadata block only."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(20)
            if len(head) < 20 or head[:8] != MAGIC:
                raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
            (version,) = struct.unpack_from("<I", head, 8)
            if version != FORMAT_VERSION:
                raise CorruptCheckpointError(f"{path}: unsupported format version {version}")
            (meta_len,) = struct.unpack_from("<Q", head, 12)
            meta_bytes = fh.read(meta_len)
            if len(meta_bytes) != meta_len:
                raise CorruptCheckpointError(f"{path}: truncated metadata block")
    except OSError as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    try:
        return json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: metadata is not valid JSON") from exc


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Rebuild the model and return (model, CheckpointMeta).

    When expected_config is given, its architecture fingerprint must match
    the stored one.
    """
    path = Path(path)
    doc = read_metadata(path)
    meta = CheckpointMeta.from_dict(doc)
    if doc.get("model_fingerprint") != meta.model_config.fingerprint():
        raise CorruptCheckpointError(f"{path}: stored fingerprint does not match stored config")
    if expected_config is not None and expected_config.fingerprint() != meta.model_config.fingerprint():
        raise FingerprintMismatchError(
            f"{path}: checkpoint architecture fingerprint "
            f"{meta.model_config.fingerprint()[:12]} does not match expected "
            f"{expected_config.fingerprint()[:12]}"
        )

    with open(path, "rb") as fh:
        fh.seek(12)
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        fh.seek(20 + meta_len)
        payload = fh.read()

    state_dict = {}
    for entry in doc["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = payload[start : start + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpointError(f"{path}: truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(chunk, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
        state_dict[entry["name"]] = torch.from_numpy(arr)

    model = build_model(meta.model_config)
    model.load_state_dict(state_dict)
    model.eval()
    return model, meta
