"""Volume classification from one or an ensemble of checkpoints."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointMeta, load_checkpoint
from .errors import FingerprintMismatchError
from .labels import SequenceLabel, label_classes, make_label
from .models import forward
from .preprocess import PreprocessConfig, preprocess_pipeline
from .volume import SeriesVolume


def _ensure_loaded(checkpoints):
    loaded = []
    for item in checkpoints:
        if isinstance(item, (str, Path)):
            loaded.append(load_checkpoint(item))
        else:
            loaded.append(item)  # (model, CheckpointMeta) pair
    if not loaded:
        raise ValueError("need at least one checkpoint")
    return loaded


def predict_volume(
    checkpoints,
    volume: SeriesVolume,
    preprocess_cfg: PreprocessConfig | None = None,
) -> tuple[SequenceLabel, np.ndarray]:
    """Classify one volume; ensembles average per-checkpoint softmax outputs.

    checkpoints may be file paths or already loaded (model, meta) pairs;
    they must agree on label set and preprocessing. Ties in the averaged
    probabilities resolve to the lowest class index.
    """
    loaded = _ensure_loaded(checkpoints)
    metas: list[CheckpointMeta] = [meta for _, meta in loaded]

    label_sets = {meta.label_set_id for meta in metas}
    if len(label_sets) != 1:
        raise FingerprintMismatchError(
            f"checkpoints trained on different label sets: {sorted(label_sets)}"
        )
    pp_fingerprints = {meta.preprocess_config.fingerprint() for meta in metas}
    if len(pp_fingerprints) != 1:
        raise FingerprintMismatchError("checkpoints disagree on preprocessing fingerprints")
    if preprocess_cfg is not None and preprocess_cfg.fingerprint() not in pp_fingerprints:
        raise FingerprintMismatchError(
            "provided preprocess config does not match the checkpoints' fingerprint"
        )

    label_set_id = metas[0].label_set_id
    cfg = preprocess_cfg if preprocess_cfg is not None else metas[0].preprocess_config
    tensor = preprocess_pipeline(volume, cfg)
    batch = tensor[np.newaxis]  # (1, 1, Z, Y, X)

    prob_rows = []
    for model, _ in loaded:
        logits = forward(model, batch)
        prob_rows.append(torch.softmax(logits, dim=1).numpy()[0].astype(np.float64))
    probabilities = np.mean(prob_rows, axis=0)

    classes = label_classes(label_set_id)
    label = make_label(label_set_id, classes[int(np.argmax(probabilities))])
    return label, probabilities


def probabilities_as_dict(label_set_id: str, probabilities: np.ndarray) -> dict[str, float]:
    classes = label_classes(label_set_id)
    return {name: float(p) for name, p in zip(classes, probabilities)}
