"""Patient-level data splitting and cross-validation fold planning.

All randomness comes from seeded PCG64 generators over the sorted unique
patient list, so splits and fold plans are identical across runs and
platforms for a fixed seed. Cut points use round half up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TooFewForKError, TooFewPatientsError


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _rng(*parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(parts))))


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.70, 0.10, 0.20)
    seed: int = 0

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"ratios must be 3 non-negative reals, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {self.ratios} (sum {sum(self.ratios)})")

    def to_dict(self) -> dict:
        return {"ratios": list(self.ratios), "seed": self.seed}

    @classmethod
    def from_dict(cls, doc: dict) -> "SplitSpec":
        return cls(ratios=tuple(doc.get("ratios", (0.70, 0.10, 0.20))), seed=doc.get("seed", 0))


def _patient_ids(manifest_or_ids) -> list[str]:
    ids = []
    for item in manifest_or_ids:
        ids.append(item.patient_id if hasattr(item, "patient_id") else str(item))
    return sorted(set(ids))


def split_patients(manifest_or_ids, spec: SplitSpec):
    """Seeded patient-level split into (train, val, test) id lists.

    Studies are never split: callers partition studies by patient
    membership afterwards. Returned lists are sorted; their union is the
    full patient set and they are pairwise disjoint.
    """
    patients = _patient_ids(manifest_or_ids)
    n = len(patients)
    if n < 3:
        raise TooFewPatientsError(f"need at least 3 patients to split, got {n}")
    order = _rng(spec.seed).permutation(n)
    shuffled = [patients[i] for i in order]
    cut1 = _round_half_up(n * spec.ratios[0])
    cut2 = _round_half_up(n * (spec.ratios[0] + spec.ratios[1]))
    return (
        sorted(shuffled[:cut1]),
        sorted(shuffled[cut1:cut2]),
        sorted(shuffled[cut2:]),
    )


@dataclass
class FoldPlan:
    k: int
    folds: list[tuple[list[str], list[str]]]  # per fold: (train ids, val ids)
    test: list[str]

    def __post_init__(self):
        if self.k != len(self.folds):
            raise ValueError(f"k={self.k} but plan has {len(self.folds)} folds")
        pool = set()
        for fold_train, fold_val in self.folds:
            train_set, val_set = set(fold_train), set(fold_val)
            if train_set & val_set:
                raise ValueError("a fold's train and validation sets overlap")
            pool |= train_set | val_set
        test_set = set(self.test)
        if pool & test_set:
            raise ValueError("test patients leak into the cross-validation pool")
        val_union = set()
        total_val = 0
        for _, fold_val in self.folds:
            val_union |= set(fold_val)
            total_val += len(fold_val)
        if val_union != pool or total_val != len(pool):
            raise ValueError("validation chunks do not partition the pool")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "folds": [{"train": t, "val": v} for t, v in self.folds],
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FoldPlan":
        return cls(
            k=doc["k"],
            folds=[(f["train"], f["val"]) for f in doc["folds"]],
            test=list(doc["test"]),
        )


def make_folds(train_val_patients, k: int, seed: int, test_patients=()) -> FoldPlan:
    """Partition the pool into k nearly-equal validation chunks (sizes differ
    by at most one); each fold trains on the rest of the pool."""
    pool = sorted(set(str(p) for p in train_val_patients))
    n = len(pool)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise TooFewForKError(f"{n} patients cannot fill {k} folds")
    order = _rng(seed, 0x6B).permutation(n)
    shuffled = [pool[i] for i in order]

    base, rem = divmod(n, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        chunk = shuffled[start : start + size]
        start += size
        rest = shuffled[: start - size] + shuffled[start:]
        folds.append((sorted(rest), sorted(chunk)))
    return FoldPlan(k=k, folds=folds, test=sorted(set(str(p) for p in test_patients)))


def plan_cross_validation(manifest_or_ids, split_spec: SplitSpec, k: int) -> FoldPlan:
    """Split patients, then fold the train+val pool, keeping test fixed."""
    train, val, test = split_patients(manifest_or_ids, split_spec)
    return make_folds(train + val, k, split_spec.seed, test_patients=test)
