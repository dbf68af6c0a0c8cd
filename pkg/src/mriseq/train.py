"""Training loop, best-epoch checkpointing, and the cross-validation runner.

Seeding scheme: every stochastic choice is derived from the configured
seeds via SeedSequence so two runs with the same configs are identical.
The per-fold model seed comes from (model seed, fold); the per-epoch
shuffle from (train seed, fold, epoch).

Run directory layout:

    <run_dir>/run.json            all configs, seeds, and the fold plan
    <run_dir>/manifest.jsonl      the dataset manifest the run used
    <run_dir>/fold<i>/checkpoint.ckpt
    <run_dir>/fold<i>/history.jsonl   one epoch record per line
    <run_dir>/fold<i>/test_report.json
    <run_dir>/ensemble.json
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dicomio, ingest, nifti
from .checkpoint import CheckpointMeta, save_checkpoint
from .errors import (
    EmptyFoldError,
    LabelOutOfRangeError,
    NonFiniteLossError,
)
from .labels import label_classes
from .manifest import StudyRecord, read_manifest, write_manifest
from .metrics import (
    EnsembleReport,
    MetricsReport,
    compute_metrics,
    confusion_matrix,
    ensemble_metrics,
)
from .models import ModelConfig, build_model
from .preprocess import PreprocessConfig, preprocess_pipeline
from .split import FoldPlan, SplitSpec, plan_cross_validation

log = logging.getLogger(__name__)

_MODEL_SALT = 0x3D
_SHUFFLE_SALT = 0x5F


def derive_seed(base: int, salt: int, *parts: int) -> int:
    """Stable 63-bit seed from (base seed, salt, indices)."""
    ss = np.random.SeedSequence([int(base), int(salt), *[int(p) for p in parts]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


@dataclass
class TrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-4
    epochs: int = 25
    loss: str = "cross_entropy"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "loss": self.loss,
            "optimizer": self.optimizer,
            "seed": self.seed,
            # fixed Adam moment constants, recorded for provenance
            "adam_betas": [0.9, 0.999],
            "adam_eps": 1e-8,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = {k: v for k, v in doc.items() if k not in ("adam_betas", "adam_eps")}
        return cls(**doc)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_accuracy": self.val_accuracy}


def compute_loss(logits, labels) -> torch.Tensor:
    """Mean cross entropy over the batch: -log softmax(logits)[label]."""
    if not isinstance(logits, torch.Tensor):
        logits = torch.as_tensor(np.asarray(logits), dtype=torch.float32)
    if not isinstance(labels, torch.Tensor):
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    labels = labels.long()
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRangeError(
            f"labels must be in [0, {n_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


class VolumeDataset:
    """Labeled series of a manifest, preprocessed once and cached in memory."""

    def __init__(self, records: list[StudyRecord], preprocess_cfg: PreprocessConfig,
                 label_set_id: str):
        self.preprocess_cfg = preprocess_cfg
        self.label_set_id = label_set_id
        classes = label_classes(label_set_id)
        self.entries = []
        for record in records:
            for entry in record.series:
                if entry.label is None or entry.label not in classes:
                    continue
                self.entries.append(
                    {
                        "series_uid": entry.series_uid,
                        "patient_id": record.patient_id,
                        "kind": entry.kind,
                        "path": entry.path,
                        "label": entry.label,
                        "class_index": classes.index(entry.label),
                    }
                )
        self.entries.sort(key=lambda e: (e["patient_id"], e["series_uid"]))
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def indices_for(self, patients) -> list[int]:
        wanted = set(patients)
        return [i for i, e in enumerate(self.entries) if e["patient_id"] in wanted]

    def tensor(self, idx: int) -> np.ndarray:
        cached = self._cache.get(idx)
        if cached is None:
            entry = self.entries[idx]
            if entry["kind"] == "volume_file":
                volume = nifti.read_volume(entry["path"])
            else:
                paths = sorted(Path(entry["path"]).iterdir())
                slices = [dicomio.read_slice(p) for p in paths if dicomio.is_dicom_file(p)]
                slices = [s for s in slices if s.get("series_uid") == entry["series_uid"]]
                volume, _ = ingest.assemble_series(slices)
            cached = preprocess_pipeline(volume, self.preprocess_cfg)
            self._cache[idx] = cached
        return cached

    def class_index(self, idx: int) -> int:
        return self.entries[idx]["class_index"]

    def series_uid(self, idx: int) -> str:
        return self.entries[idx]["series_uid"]

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        xs = np.stack([self.tensor(i) for i in indices])
        ys = np.array([self.class_index(i) for i in indices], dtype=np.int64)
        return torch.from_numpy(xs), torch.from_numpy(ys)


@dataclass
class FoldResult:
    fold_id: int
    meta: CheckpointMeta
    best_state: dict
    history: list[EpochRecord] = field(default_factory=list)


def train_fold(
    fold: tuple[list[str], list[str]],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: VolumeDataset,
    fold_id: int = 0,
) -> FoldResult:
    """Train for the configured epochs, keeping the weights of the epoch with
    the highest validation accuracy (earliest epoch on ties)."""
    train_patients, val_patients = fold
    train_idx = dataset.indices_for(train_patients)
    val_idx = dataset.indices_for(val_patients)
    if not train_idx:
        raise EmptyFoldError(f"fold {fold_id} has no labeled training series")

    fold_model_cfg = replace(model_cfg, seed=derive_seed(model_cfg.seed, _MODEL_SALT, fold_id))
    model = build_model(fold_model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)

    history: list[EpochRecord] = []
    best_acc = -1.0
    best_epoch = -1
    best_state: dict = {}
    for epoch in range(train_cfg.epochs):
        model.train()
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([train_cfg.seed, _SHUFFLE_SALT, fold_id, epoch])))
        order = [train_idx[i] for i in rng.permutation(len(train_idx))]
        batch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            xs, ys = dataset.batch(order[start : start + train_cfg.batch_size])
            logits = model(xs)
            loss = compute_loss(logits, ys)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"fold {fold_id} epoch {epoch}: loss became {loss.item()} at "
                    f"batch starting {start}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss.item()))

        val_acc = evaluate_accuracy(model, dataset, val_idx)
        history.append(EpochRecord(epoch, float(np.mean(batch_losses)), val_acc))
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.debug("fold %d epoch %d: loss %.4f val_acc %.4f",
                  fold_id, epoch, history[-1].train_loss, val_acc)

    meta = CheckpointMeta(
        model_config=fold_model_cfg,
        label_set_id=dataset.label_set_id,
        preprocess_config=dataset.preprocess_cfg,
        fold_id=fold_id,
        best_epoch=best_epoch,
        best_validation_accuracy=best_acc,
        train_config=train_cfg.to_dict(),
    )
    return FoldResult(fold_id=fold_id, meta=meta, best_state=best_state, history=history)


def evaluate_accuracy(model, dataset: VolumeDataset, indices, batch_size: int = 8) -> float:
    if not indices:
        return 0.0
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            xs, ys = dataset.batch(indices[start : start + batch_size])
            pred = model(xs).argmax(dim=1)
            correct += int((pred == ys).sum())
    return correct / len(indices)


def evaluate_on_test(model, dataset: VolumeDataset, test_idx, batch_size: int = 8):
    """Per-series predictions plus a MetricsReport on the test indices."""
    model.eval()
    per_series = []
    pairs = []
    with torch.no_grad():
        for start in range(0, len(test_idx), batch_size):
            chunk = test_idx[start : start + batch_size]
            xs, ys = dataset.batch(chunk)
            probs = torch.softmax(model(xs), dim=1).numpy()
            preds = probs.argmax(axis=1)
            for i, idx in enumerate(chunk):
                classes = label_classes(dataset.label_set_id)
                pairs.append((int(ys[i]), int(preds[i])))
                per_series.append(
                    {
                        "series_uid": dataset.series_uid(idx),
                        "true": classes[int(ys[i])],
                        "predicted": classes[int(preds[i])],
                        "probabilities": [round(float(p), 6) for p in probs[i]],
                    }
                )
    cm = confusion_matrix(pairs, dataset.label_set_id)
    return compute_metrics(cm), per_series


@dataclass
class CVResult:
    run_dir: Path
    plan: FoldPlan
    checkpoint_paths: list[Path]
    fold_reports: list[MetricsReport]
    ensemble: EnsembleReport


def run_cross_validation(
    records: list[StudyRecord],
    k: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    split_spec: SplitSpec,
    preprocess_cfg: PreprocessConfig,
    label_set_id: str,
    run_dir,
    jobs: int = 1,
) -> CVResult:
    """Train k folds and evaluate each best checkpoint on the fixed test split.

    Per-fold outputs are persisted as soon as a fold completes, so partial
    runs leave usable artifacts behind.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    plan = plan_cross_validation(records, split_spec, k)

    manifest_path = run_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    run_doc = {
        "label_set_id": label_set_id,
        "k": k,
        "split": split_spec.to_dict(),
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "preprocess": preprocess_cfg.to_dict(),
        "fold_plan": plan.to_dict(),
    }
    with open(run_dir / "run.json", "w", encoding="utf-8") as fh:
        json.dump(run_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

    fold_args = [
        (str(run_dir), fold_id, run_doc) for fold_id in range(k)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, k)) as pool:
            report_docs = list(pool.map(_fold_worker, fold_args))
    else:
        dataset = VolumeDataset(records, preprocess_cfg, label_set_id)
        report_docs = [_run_fold(run_dir, fold_id, run_doc, dataset)
                       for fold_id in range(k)]

    fold_reports = [MetricsReport.from_dict(doc["metrics"]) for doc in report_docs]
    ensemble = ensemble_metrics(fold_reports)
    with open(run_dir / "ensemble.json", "w", encoding="utf-8") as fh:
        json.dump(ensemble.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    return CVResult(
        run_dir=run_dir,
        plan=plan,
        checkpoint_paths=[run_dir / f"fold{i}" / "checkpoint.ckpt" for i in range(k)],
        fold_reports=fold_reports,
        ensemble=ensemble,
    )


def _fold_worker(args) -> dict:
    run_dir, fold_id, run_doc = args
    records = read_manifest(Path(run_dir) / "manifest.jsonl")
    dataset = VolumeDataset(
        records,
        PreprocessConfig.from_dict(run_doc["preprocess"]),
        run_doc["label_set_id"],
    )
    return _run_fold(Path(run_dir), fold_id, run_doc, dataset)


def _run_fold(run_dir: Path, fold_id: int, run_doc: dict, dataset: VolumeDataset) -> dict:
    plan = FoldPlan.from_dict(run_doc["fold_plan"])
    model_cfg = ModelConfig.from_dict(run_doc["model"])
    train_cfg = TrainConfig.from_dict(run_doc["train"])

    result = train_fold(plan.folds[fold_id], model_cfg, train_cfg, dataset, fold_id=fold_id)

    fold_dir = run_dir / f"fold{fold_id}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    with open(fold_dir / "history.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record.to_dict()))
            fh.write("\n")

    model = build_model(result.meta.model_config)
    model.load_state_dict(result.best_state)
    save_checkpoint(model, result.meta, fold_dir / "checkpoint.ckpt")

    test_idx = dataset.indices_for(plan.test)
    report, per_series = evaluate_on_test(model, dataset, test_idx)
    doc = {
        "fold": fold_id,
        "best_epoch": result.meta.best_epoch,
        "best_validation_accuracy": result.meta.best_validation_accuracy,
        "metrics": report.to_dict(),
        "per_series": per_series,
    }
    with open(fold_dir / "test_report.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("fold %d: best epoch %d (val acc %.4f), test weighted F1 %.4f",
             fold_id, result.meta.best_epoch, result.meta.best_validation_accuracy,
             report.weighted["f1"])
    return doc
