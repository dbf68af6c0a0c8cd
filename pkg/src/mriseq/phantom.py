"""Synthetic multi-parametric phantom studies with per-class intensity signatures.

Volumes are intensity-statistical, not anatomical: every study owns one
smooth random "anatomy" field shared by all of its series, and each class
renders that field with its own background level, noise amplitude and
granularity, lesion count and polarity. Signatures are chosen so classes
differ in distribution shape (which survives percentile normalization),
not just in mean and scale (which does not).

Hard mode overlaps the DWI and T2FS signatures: low-b-value DWI volumes
render with the T2FS signature, making DWI-read-as-T2FS the expected
dominant confusion.

All draws derive from PCG64 generators seeded from (spec seed, patient,
study index), so datasets are bit-reproducible for a fixed spec.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import nifti
from .errors import InvalidSpecError
from .labels import label_classes
from .manifest import (
    HeaderFields,
    SeriesEntry,
    StudyRecord,
    write_label_sidecar,
    write_manifest,
)
from .volume import SeriesVolume

LOW_B_MAX = 200.0  # b-values at or below this count as "low"

_SCANNERS = ("Aera", "Verio", "Biograph mMR")

_DESCRIPTIONS = {
    "VDCE": "t1_vibe_dyn_venous_tra",
    "T2W": "t2_tse_tra",
    "T2FS": "t2_tirm_tra_fs",
    "DWI": "ep2d_diff_b{b}_tra",
    "ADC": "ep2d_diff_tra_adc",
    "T1": "t1_mpr_sag",
    "T1CE": "t1_mpr_post_gd_sag",
    "T2": "t2_tse_tra",
    "FLAIR": "t2_flair_tra",
}


@dataclass
class ClassSignature:
    background_mean: float
    background_sigma: float
    texture_sigma: float        # smoothing radius of the noise field (voxels)
    anatomy_weight: float
    lesion_count: tuple[int, int]
    lesion_intensity_mult: float
    lesion_radius: tuple[float, float] = (1.5, 3.5)  # in-plane voxels
    b_values: tuple[float, ...] | None = None  # DWI only

    def __post_init__(self):
        if self.background_sigma < 0 or self.texture_sigma < 0:
            raise InvalidSpecError("sigmas must be >= 0")
        if self.lesion_intensity_mult <= 0:
            raise InvalidSpecError("lesion_intensity_mult must be > 0")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise InvalidSpecError(f"bad lesion_count range {self.lesion_count}")
        self.lesion_count = (int(lo), int(hi))
        r_lo, r_hi = self.lesion_radius
        if not 0 < r_lo <= r_hi:
            raise InvalidSpecError(f"bad lesion_radius range {self.lesion_radius}")
        self.lesion_radius = (float(r_lo), float(r_hi))
        if self.b_values is not None:
            self.b_values = tuple(float(b) for b in self.b_values)
            if any(b < 0 for b in self.b_values):
                raise InvalidSpecError("b_values must be >= 0")

    def to_dict(self) -> dict:
        doc = {
            "background_mean": self.background_mean,
            "background_sigma": self.background_sigma,
            "texture_sigma": self.texture_sigma,
            "anatomy_weight": self.anatomy_weight,
            "lesion_count": list(self.lesion_count),
            "lesion_intensity_mult": self.lesion_intensity_mult,
            "lesion_radius": list(self.lesion_radius),
        }
        if self.b_values is not None:
            doc["b_values"] = list(self.b_values)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ClassSignature":
        doc = dict(doc)
        doc["lesion_count"] = tuple(doc["lesion_count"])
        if "lesion_radius" in doc:
            doc["lesion_radius"] = tuple(doc["lesion_radius"])
        if "b_values" in doc and doc["b_values"] is not None:
            doc["b_values"] = tuple(doc["b_values"])
        return cls(**doc)


def _default_body_signatures(hard: bool) -> dict[str, ClassSignature]:
    # classes must stay apart in distribution SHAPE and spatial texture, not
    # in mean/scale: percentile normalization removes affine differences, and
    # small-batch training sees level features only noisily. Texture axes:
    # VDCE many small bright dots on fine grain; T2W smooth large-scale
    # contrast, lesion-free; T2FS heavy fine grain; DWI coarse blobs plus few
    # large bright lesions; ADC smooth with large dark holes.
    t2fs = ClassSignature(
        background_mean=0.45, background_sigma=0.15, texture_sigma=0.9,
        anatomy_weight=0.25, lesion_count=(0, 1), lesion_intensity_mult=1.6,
        lesion_radius=(1.5, 2.0),
    )
    dwi = ClassSignature(
        background_mean=0.30, background_sigma=0.08, texture_sigma=2.2,
        anatomy_weight=0.15, lesion_count=(4, 6), lesion_intensity_mult=3.0,
        lesion_radius=(3.0, 4.0), b_values=(50.0, 400.0, 800.0),
    )
    return {
        "VDCE": ClassSignature(
            background_mean=0.50, background_sigma=0.04, texture_sigma=0.4,
            anatomy_weight=0.3, lesion_count=(10, 16), lesion_intensity_mult=2.5,
            lesion_radius=(1.2, 2.0),
        ),
        "T2W": ClassSignature(
            background_mean=0.60, background_sigma=0.04, texture_sigma=3.0,
            anatomy_weight=1.4, lesion_count=(0, 0), lesion_intensity_mult=1.3,
            lesion_radius=(2.0, 2.5),
        ),
        "T2FS": t2fs,
        "DWI": dwi,
        "ADC": ClassSignature(
            background_mean=0.80, background_sigma=0.03, texture_sigma=2.5,
            anatomy_weight=0.1, lesion_count=(5, 7), lesion_intensity_mult=0.1,
            lesion_radius=(3.0, 4.5),
        ),
    }


def _default_brain_signatures() -> dict[str, ClassSignature]:
    return {
        "T1": ClassSignature(0.55, 0.05, 2.0, 1.0, (1, 2), 0.6),
        "T1CE": ClassSignature(0.55, 0.05, 2.0, 1.0, (4, 8), 2.0),
        "T2": ClassSignature(0.65, 0.09, 1.0, 0.8, (1, 3), 1.5),
        "FLAIR": ClassSignature(0.40, 0.12, 0.6, 0.3, (2, 5), 1.8),
    }


@dataclass
class PhantomSpec:
    # default geometry always covers the desk_preprocess_config() grid, so
    # the pipeline crops rather than pads (a variable zero border would be
    # class-independent noise)
    label_set_id: str = "body"
    signatures: dict = field(default_factory=dict)
    shape_range: tuple = ((34, 44), (34, 44), (12, 16))
    spacing_range: tuple = ((3.8, 4.6), (3.8, 4.6), (8.0, 9.0))
    conflict_fraction: float = 0.0
    hard_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        classes = label_classes(self.label_set_id)
        if not self.signatures:
            if self.label_set_id == "body":
                self.signatures = _default_body_signatures(self.hard_mode)
            else:
                self.signatures = _default_brain_signatures()
        self.signatures = {
            name: sig if isinstance(sig, ClassSignature) else ClassSignature.from_dict(sig)
            for name, sig in self.signatures.items()
        }
        missing = [c for c in classes if c not in self.signatures]
        if missing:
            raise InvalidSpecError(f"signatures missing for classes: {missing}")
        for axis_range in self.shape_range:
            lo, hi = axis_range
            if not (8 <= lo <= hi <= 512):
                raise InvalidSpecError(f"shape range {axis_range} outside [8, 512]")
        for axis_range in self.spacing_range:
            lo, hi = axis_range
            if not (0 < lo <= hi):
                raise InvalidSpecError(f"bad spacing range {axis_range}")
        if not 0.0 <= self.conflict_fraction <= 1.0:
            raise InvalidSpecError(f"conflict_fraction must be in [0, 1], "
                                   f"got {self.conflict_fraction}")

    def to_dict(self) -> dict:
        return {
            "label_set_id": self.label_set_id,
            "signatures": {name: sig.to_dict() for name, sig in self.signatures.items()},
            "shape_range": [list(r) for r in self.shape_range],
            "spacing_range": [list(r) for r in self.spacing_range],
            "conflict_fraction": self.conflict_fraction,
            "hard_mode": self.hard_mode,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        doc = dict(doc)
        if "shape_range" in doc:
            doc["shape_range"] = tuple(tuple(r) for r in doc["shape_range"])
        if "spacing_range" in doc:
            doc["spacing_range"] = tuple(tuple(r) for r in doc["spacing_range"])
        return cls(**doc)


@dataclass
class PhantomSeries:
    headers: HeaderFields
    label: str
    volume: SeriesVolume


@dataclass
class PhantomStudy:
    patient_id: str
    study_uid: str
    series: list[PhantomSeries]

    def to_record(self, paths: dict[str, str] | None = None) -> StudyRecord:
        entries = [
            SeriesEntry(
                series_uid=s.headers.series_uid,
                headers=s.headers,
                kind="volume_file",
                path=(paths or {}).get(s.headers.series_uid),
                label=s.label,
            )
            for s in self.series
        ]
        return StudyRecord(self.patient_id, self.study_uid, entries)


def _study_rng(spec_seed: int, patient_id: str, study_index: int) -> np.random.Generator:
    patient_hash = int.from_bytes(
        hashlib.sha256(patient_id.encode("utf-8")).digest()[:8], "little"
    )
    ss = np.random.SeedSequence([int(spec_seed), patient_hash, int(study_index)])
    return np.random.Generator(np.random.PCG64(ss))


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    if sigma > 0:
        noise = gaussian_filter(noise, sigma=sigma)
        sd = noise.std()
        if sd > 0:
            noise = noise / sd
    return noise


def _render_volume(rng, shape, anatomy, sig: ClassSignature, b_value=None) -> np.ndarray:
    attenuation = 1.0
    lesion_boost = 1.0
    if b_value is not None:
        # diffusion weighting scales the whole field down (so percentile
        # normalization mostly cancels it) and favors the lesions a little
        attenuation = float(np.exp(-b_value / 1300.0))
        lesion_boost = 1.0 + b_value / 2800.0
    base = sig.background_mean * (1.0 + sig.anatomy_weight * (anatomy - 0.5))
    data = base + sig.background_sigma * _smooth_noise(rng, shape, sig.texture_sigma)
    base = base * attenuation
    data = data * attenuation

    n_lesions = int(rng.integers(sig.lesion_count[0], sig.lesion_count[1] + 1))
    if n_lesions > 0:
        zz = np.arange(shape[2])[np.newaxis, np.newaxis, :]
        yy = np.arange(shape[1])[np.newaxis, :, np.newaxis]
        xx = np.arange(shape[0])[:, np.newaxis, np.newaxis]
        level = sig.background_mean * sig.lesion_intensity_mult * attenuation * lesion_boost
        for _ in range(n_lesions):
            cx = rng.uniform(2, shape[0] - 3)
            cy = rng.uniform(2, shape[1] - 3)
            cz = rng.uniform(1, shape[2] - 2)
            r_plane = rng.uniform(*sig.lesion_radius)
            r_z = max(1.0, r_plane / 2.0)
            mask = (
                ((xx - cx) / r_plane) ** 2
                + ((yy - cy) / r_plane) ** 2
                + ((zz - cz) / r_z) ** 2
            ) <= 1.0
            data[mask] = level + 0.3 * (data[mask] - base[mask])
    return np.clip(data, 0.0, None).astype(np.float32)


def generate_study(spec: PhantomSpec, patient_id: str, study_index: int = 0) -> PhantomStudy:
    """One study: a volume per class, plus 1-3 DWI b-values for the body set.

    Deterministic per (spec.seed, patient_id, study_index). All volumes of
    the study share anatomy, shape, and spacing; classes differ only by
    intensity signature.
    """
    rng = _study_rng(spec.seed, patient_id, study_index)
    shape = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in spec.shape_range)
    spacing = tuple(float(rng.uniform(lo, hi)) for lo, hi in spec.spacing_range)
    anatomy = _smooth_noise(rng, shape, sigma=max(2.0, min(shape) / 6.0))
    lo, hi = anatomy.min(), anatomy.max()
    anatomy = (anatomy - lo) / (hi - lo) if hi > lo else np.zeros(shape)

    scanner = _SCANNERS[int(rng.integers(len(_SCANNERS)))]
    study_uid = f"{patient_id}.S{study_index}"
    classes = label_classes(spec.label_set_id)

    renders: list[tuple[str, float | None]] = []
    for name in classes:
        if spec.signatures[name].b_values:
            b_pool = list(spec.signatures[name].b_values)
            count = int(rng.integers(1, min(3, len(b_pool)) + 1))
            order = rng.permutation(len(b_pool))
            chosen = sorted(b_pool[i] for i in order[:count])
            renders.extend((name, b) for b in chosen)
        else:
            renders.append((name, None))

    series = []
    for name, b_value in renders:
        sig = spec.signatures[name]
        if (
            spec.hard_mode
            and name == "DWI"
            and b_value is not None
            and b_value <= LOW_B_MAX
        ):
            # hard mode: low-b diffusion volumes render as T2FS look-alikes
            sig = replace(spec.signatures["T2FS"], b_values=None)
            voxels = _render_volume(rng, shape, anatomy, sig, b_value=None)
        else:
            voxels = _render_volume(rng, shape, anatomy, sig, b_value=b_value)
        suffix = f"-b{int(b_value)}" if b_value is not None else ""
        series_uid = f"{study_uid}.{name}{suffix}"
        description = _DESCRIPTIONS[name]
        if "{b}" in description:
            description = description.format(b=int(b_value))
        headers = HeaderFields(
            patient_id=patient_id,
            study_uid=study_uid,
            series_uid=series_uid,
            body_part_examined="ABDOMEN" if spec.label_set_id == "body" else "BRAIN",
            procedure_step_description=(
                "MRI Abdomen" if spec.label_set_id == "body" else "MRI Brain"
            ),
            series_description=description,
            protocol_name="routine multiparametric mr",
            scanner_model=scanner,
            b_value=b_value,
        )
        series.append(
            PhantomSeries(
                headers=headers,
                label=name,
                volume=SeriesVolume(voxels, spacing=spacing),
            )
        )
    return PhantomStudy(patient_id=patient_id, study_uid=study_uid, series=series)


def generate_dataset(
    spec: PhantomSpec,
    n_patients: int,
    out_dir,
    studies_per_patient: int = 1,
) -> list[StudyRecord]:
    """Write a phantom dataset (volumes, header sidecars, labels, manifest).

    A conflict_fraction > 0 plants a body-part/procedure contradiction in
    the first series of round(n_studies * fraction) deterministically
    chosen studies, for audit testing.
    """
    if n_patients < 3:
        raise InvalidSpecError(
            f"n_patients must be >= 3 (patient-level splitting needs it), got {n_patients}"
        )
    if studies_per_patient < 1:
        raise InvalidSpecError("studies_per_patient must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    studies: list[PhantomStudy] = []
    for p in range(n_patients):
        patient_id = f"P{p:04d}"
        for s in range(studies_per_patient):
            studies.append(generate_study(spec, patient_id, s))

    n_conflicts = int(round(len(studies) * spec.conflict_fraction))
    conflict_rng = _study_rng(spec.seed, "__conflict_choice__", 0)
    conflict_indices = set(
        int(i) for i in conflict_rng.choice(len(studies), size=n_conflicts, replace=False)
    )
    for idx in sorted(conflict_indices):
        first = studies[idx].series[0]
        first.headers.body_part_examined = "BRAIN"  # procedure still says abdomen

    records = []
    labels = {}
    for study in studies:
        study_dir = out / study.patient_id / study.study_uid
        study_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for s in study.series:
            vol_path = study_dir / f"{s.headers.series_uid}.nii.gz"
            nifti.write_volume(vol_path, s.volume)
            sidecar = study_dir / f"{s.headers.series_uid}.json"
            tmp = sidecar.with_name(sidecar.name + ".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(s.headers.to_dict(), fh, indent=2)
            tmp.replace(sidecar)
            paths[s.headers.series_uid] = str(vol_path)
            labels[s.headers.series_uid] = s.label
        records.append(study.to_record(paths))

    records.sort(key=lambda r: (r.patient_id, r.study_uid))
    write_manifest(records, out / "manifest.jsonl")
    write_label_sidecar(labels, out / "labels.jsonl")
    card = {
        "spec": spec.to_dict(),
        "n_patients": n_patients,
        "studies_per_patient": studies_per_patient,
        "n_studies": len(records),
        "n_series": sum(len(r.series) for r in records),
        "n_seeded_conflicts": n_conflicts,
        "generator": "numpy PCG64 via SeedSequence(seed, sha256(patient)[:8], study_index)",
    }
    with open(out / "dataset_card.json", "w", encoding="utf-8") as fh:
        json.dump(card, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records
