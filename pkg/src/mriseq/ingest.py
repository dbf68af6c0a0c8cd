"""Series assembly from DICOM slices and dataset manifest construction."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dicomio, nifti
from .errors import (
    DuplicatePositionError,
    EmptyDatasetError,
    MissingIdentifierError,
    MixedSeriesError,
    NonUniformGapError,
    UnreadableFileError,
)
from .labels import UNKNOWN, RuleTable, default_rule_table, infer_label_from_headers
from .manifest import HeaderFields, SeriesEntry, StudyRecord, read_label_sidecar
from .volume import SeriesVolume, canonicalize

log = logging.getLogger(__name__)

# maximum deviation of any inter-slice gap from the median gap
GAP_TOLERANCE = 0.10
# gaps smaller than this (mm) count as duplicate slice positions
DUPLICATE_EPS = 1e-6

# b-value candidates in trust order: the standard diffusion tag, then the
# Siemens and GE private fallbacks (GE encodes values offset by 1e9).
B_VALUE_SOURCES = ("diffusion_b_value", "siemens_b_value", "ge_b_value")


def extract_headers(record) -> HeaderFields:
    """Normalize one slice record's metadata into HeaderFields.

    Accepts anything with a ``get(name)`` for the normalized field names
    (a dicomio.SliceRecord, or a plain dict via dict.get).
    """
    get = record.get
    patient_id = _clean_str(get("patient_id"))
    study_uid = _clean_str(get("study_uid"))
    series_uid = _clean_str(get("series_uid"))
    missing = [
        name
        for name, value in (
            ("patient_id", patient_id),
            ("study_uid", study_uid),
            ("series_uid", series_uid),
        )
        if not value
    ]
    if missing:
        raise MissingIdentifierError(f"record is missing identifiers: {', '.join(missing)}")

    body_part = _clean_str(get("body_part_examined"))
    return HeaderFields(
        patient_id=patient_id,
        study_uid=study_uid,
        series_uid=series_uid,
        body_part_examined=body_part.upper() if body_part else None,
        procedure_step_description=_clean_str(get("procedure_step_description")),
        series_description=_clean_str(get("series_description")),
        protocol_name=_clean_str(get("protocol_name")),
        scanner_model=_clean_str(get("scanner_model")),
        b_value=_extract_b_value(get),
        echo_time_ms=_positive_or_none(get("echo_time_ms")),
        repetition_time_ms=_positive_or_none(get("repetition_time_ms")),
    )


def _clean_str(value) -> str | None:
    if value is None:
        return None
    text = str(value).strip()
    return text or None


def _positive_or_none(value) -> float | None:
    if value is None:
        return None
    try:
        value = float(value)
    except (TypeError, ValueError):
        return None
    return value if np.isfinite(value) and value > 0 else None


def _extract_b_value(get) -> float | None:
    for source in B_VALUE_SOURCES:
        raw = get(source)
        if raw is None:
            continue
        if isinstance(raw, (list, tuple)):
            raw = raw[0] if raw else None
        try:
            value = float(raw)
        except (TypeError, ValueError):
            continue
        if source == "ge_b_value" and value >= 1e9:
            value -= 1e9
        if np.isfinite(value) and value >= 0:
            return value
    return None


def assemble_series(slice_records) -> tuple[SeriesVolume, HeaderFields]:
    """Stack per-slice records into one volume, sorted along the slice normal.

    Slices may arrive in any order. The slice spacing is the median
    inter-slice gap; series with duplicate positions or gaps deviating
    more than 10% from the median are rejected.
    """
    records = list(slice_records)
    if not records:
        raise ValueError("assemble_series needs at least one slice")
    headers = extract_headers(records[0])
    uids = {r.get("series_uid") for r in records}
    if len(uids) != 1:
        raise MixedSeriesError(f"slices belong to {len(uids)} different series: {sorted(uids)}")

    orientation = np.asarray(records[0].get("image_orientation", (1, 0, 0, 0, 1, 0)), dtype=float)
    if orientation.shape != (6,):
        raise UnreadableFileError(f"series {headers.series_uid}: bad ImageOrientationPatient")
    row_dir, col_dir = orientation[:3], orientation[3:]
    normal = np.cross(row_dir, col_dir)

    positions = []
    for rec in records:
        pos = rec.get("image_position")
        if pos is None:
            raise UnreadableFileError(
                f"series {headers.series_uid}: slice without ImagePositionPatient"
            )
        positions.append(np.asarray(pos, dtype=float))
    projections = [float(np.dot(p, normal)) for p in positions]
    order = sorted(range(len(records)), key=lambda i: projections[i])
    records = [records[i] for i in order]
    positions = [positions[i] for i in order]
    projections = [projections[i] for i in order]

    if len(records) > 1:
        gaps = np.diff(projections)
        if np.any(np.abs(gaps) < DUPLICATE_EPS):
            raise DuplicatePositionError(
                f"series {headers.series_uid}: duplicate slice positions"
            )
        median_gap = float(np.median(gaps))
        if np.max(np.abs(gaps - median_gap)) > GAP_TOLERANCE * abs(median_gap):
            raise NonUniformGapError(
                f"series {headers.series_uid}: inter-slice gaps {np.round(gaps, 4).tolist()} "
                f"deviate more than {GAP_TOLERANCE:.0%} from median {median_gap:.4g}"
            )
        slice_spacing = median_gap
    else:
        slice_spacing = float(
            records[0].get("spacing_between_slices")
            or records[0].get("slice_thickness")
            or 1.0
        )

    shapes = {rec.pixels.shape for rec in records if rec.pixels is not None}
    if len(shapes) != 1 or any(rec.pixels is None for rec in records):
        raise UnreadableFileError(
            f"series {headers.series_uid}: slices missing pixels or with mixed shapes"
        )

    slope = float(records[0].get("rescale_slope", 1.0) or 1.0)
    intercept = float(records[0].get("rescale_intercept", 0.0) or 0.0)
    # voxel axes: x along image rows (column index), y along image columns
    # (row index), z along the slice normal
    voxels = np.stack([rec.pixels.T for rec in records], axis=2).astype(np.float32)
    if slope != 1.0 or intercept != 0.0:
        voxels = voxels * np.float32(slope) + np.float32(intercept)

    spacing_rc = records[0].get("pixel_spacing", (1.0, 1.0))
    row_spacing, col_spacing = float(spacing_rc[0]), float(spacing_rc[1])
    affine = np.eye(4)
    affine[:3, 0] = row_dir * col_spacing
    affine[:3, 1] = col_dir * row_spacing
    affine[:3, 2] = normal * slice_spacing
    affine[:3, 3] = positions[0]
    return canonicalize(voxels, affine), headers


def load_volume_file(path) -> SeriesVolume:
    """Read a single-volume container file (see nifti module) canonicalized."""
    return nifti.read_volume(path)


@dataclass
class RejectedSeries:
    series_uid: str
    reason: str
    paths: list[str] = field(default_factory=list)


@dataclass
class IngestResult:
    records: list[StudyRecord]
    rejected: list[RejectedSeries] = field(default_factory=list)

    @property
    def flagged(self) -> list[StudyRecord]:
        return [r for r in self.records if not r.complete]


def build_manifest(
    root_dir,
    label_source: str = "rules",
    rules: RuleTable | None = None,
    label_set_id: str = "body",
    jobs: int = 1,
) -> list[StudyRecord]:
    """Scan root_dir into StudyRecords ordered by (patient_id, study_uid)."""
    return scan_dataset(root_dir, label_source, rules, label_set_id, jobs).records


def scan_dataset(
    root_dir,
    label_source: str = "rules",
    rules: RuleTable | None = None,
    label_set_id: str = "body",
    jobs: int = 1,
) -> IngestResult:
    """build_manifest plus the list of rejected series (never silently dropped).

    label_source "rules" infers labels from headers through the rule
    table; "sidecar" reads <root>/labels.jsonl. Studies that do not cover
    every class of the active profile are flagged incomplete.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise EmptyDatasetError(f"dataset root {root} does not exist")
    if label_source not in ("rules", "sidecar"):
        raise ValueError(f"label_source must be 'rules' or 'sidecar', got {label_source!r}")
    if rules is None:
        rules = default_rule_table(label_set_id)

    sidecar: dict[str, str] = {}
    if label_source == "sidecar":
        sidecar_path = root / "labels.jsonl"
        if not sidecar_path.is_file():
            raise EmptyDatasetError(f"label sidecar {sidecar_path} not found")
        sidecar = read_label_sidecar(sidecar_path)

    volume_paths = sorted(p for p in root.rglob("*") if p.name.endswith((".nii", ".nii.gz")))
    dicom_paths = sorted(p for p in root.rglob("*") if p.is_file() and dicomio.is_dicom_file(p))

    entries: list[SeriesEntry] = []
    rejected: list[RejectedSeries] = []

    def _volume_entry(path):
        try:
            headers = _headers_for_volume_file(path, root)
        except (MissingIdentifierError, ValueError, json.JSONDecodeError) as exc:
            return RejectedSeries(str(path), f"bad sidecar headers: {exc}", [str(path)])
        return SeriesEntry(
            series_uid=headers.series_uid, headers=headers, kind="volume_file", path=str(path)
        )

    if jobs > 1 and volume_paths:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_volume_entry, volume_paths))
    else:
        results = [_volume_entry(p) for p in volume_paths]
    for item in results:
        if isinstance(item, RejectedSeries):
            log.warning("rejected series %s: %s", item.series_uid, item.reason)
            rejected.append(item)
        else:
            entries.append(item)

    for series_uid, paths in sorted(_group_dicom_series(dicom_paths, rejected).items()):
        try:
            slices = [dicomio.read_slice(p) for p in paths]
            _, headers = assemble_series(slices)
        except (
            MixedSeriesError,
            NonUniformGapError,
            DuplicatePositionError,
            MissingIdentifierError,
            UnreadableFileError,
        ) as exc:
            log.warning("rejected series %s: %s", series_uid, exc)
            rejected.append(RejectedSeries(series_uid, str(exc), [str(p) for p in paths]))
            continue
        entries.append(
            SeriesEntry(
                series_uid=headers.series_uid,
                headers=headers,
                kind="dicom_dir",
                path=str(Path(paths[0]).parent),
            )
        )

    if not entries and not rejected:
        raise EmptyDatasetError(f"no studies found under {root}")

    for entry in entries:
        if label_source == "sidecar":
            entry.label = sidecar.get(entry.series_uid)
        else:
            inferred = infer_label_from_headers(entry.headers, rules)
            entry.label = None if inferred == UNKNOWN else inferred.value

    records = _group_into_studies(entries, rules.label_set_id)
    if not records:
        raise EmptyDatasetError(f"no studies found under {root}")
    return IngestResult(records=records, rejected=rejected)


def _headers_for_volume_file(path: Path, root: Path) -> HeaderFields:
    """Headers from the per-series JSON sidecar, else derived from the path.

    The path fallback expects <root>/<patient>/<study>/<series>.nii.gz.
    """
    sidecar = path.with_name(_stem(path) + ".json")
    if sidecar.is_file():
        with open(sidecar, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return extract_headers(doc)
    rel = path.relative_to(root)
    parts = rel.parts
    if len(parts) < 3:
        raise MissingIdentifierError(
            f"{path}: no sidecar and path too shallow to derive patient/study/series ids"
        )
    return HeaderFields(
        patient_id=parts[-3], study_uid=parts[-2], series_uid=_stem(path)
    )


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _group_dicom_series(paths, rejected: list[RejectedSeries]) -> dict[str, list]:
    groups: dict[str, list] = {}
    for path in paths:
        try:
            rec = dicomio.read_slice(path)
        except UnreadableFileError as exc:
            rejected.append(RejectedSeries(str(path), str(exc), [str(path)]))
            continue
        uid = rec.get("series_uid")
        if not uid:
            rejected.append(
                RejectedSeries(str(path), "slice without SeriesInstanceUID", [str(path)])
            )
            continue
        groups.setdefault(uid, []).append(path)
    return groups


def _group_into_studies(entries: list[SeriesEntry], label_set_id: str) -> list[StudyRecord]:
    from .labels import label_classes

    classes = label_classes(label_set_id)
    by_study: dict[tuple[str, str], list[SeriesEntry]] = {}
    for entry in entries:
        key = (entry.headers.patient_id, entry.headers.study_uid)
        by_study.setdefault(key, []).append(entry)

    records = []
    for (patient_id, study_uid), members in sorted(by_study.items()):
        members = sorted(members, key=lambda e: e.series_uid)
        present = {m.label for m in members if m.label}
        missing = [c for c in classes if c not in present]
        records.append(
            StudyRecord(
                patient_id=patient_id,
                study_uid=study_uid,
                series=members,
                complete=not missing,
                missing_classes=missing,
            )
        )
    return records
