"""Normalized header metadata, study records, and the JSON-lines manifest.

Manifest files hold one StudyRecord per line, UTF-8, with keys emitted in
a fixed documented order: patient_id, study_uid, complete,
missing_classes, series. Each series entry is ordered series_uid, kind,
path, label, headers. The fixed ordering makes manifests byte-stable
across runs and platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

_HEADER_KEYS = (
    "patient_id",
    "study_uid",
    "series_uid",
    "body_part_examined",
    "procedure_step_description",
    "series_description",
    "protocol_name",
    "scanner_model",
    "b_value",
    "echo_time_ms",
    "repetition_time_ms",
)


@dataclass
class HeaderFields:
    """Normalized DICOM-derived metadata for one series."""

    patient_id: str
    study_uid: str
    series_uid: str
    body_part_examined: str | None = None
    procedure_step_description: str | None = None
    series_description: str | None = None
    protocol_name: str | None = None
    scanner_model: str | None = None
    b_value: float | None = None
    echo_time_ms: float | None = None
    repetition_time_ms: float | None = None

    def __post_init__(self):
        for name in ("patient_id", "study_uid", "series_uid"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ValueError(f"{name} must be a non-empty string")
        if self.b_value is not None:
            self.b_value = float(self.b_value)
            if not math.isfinite(self.b_value) or self.b_value < 0:
                raise ValueError(f"b_value must be finite and >= 0, got {self.b_value}")
        for name in ("echo_time_ms", "repetition_time_ms"):
            value = getattr(self, name)
            if value is not None:
                value = float(value)
                if not math.isfinite(value) or value <= 0:
                    raise ValueError(f"{name} must be finite and > 0, got {value}")
                setattr(self, name, value)

    def to_dict(self) -> dict:
        return {key: getattr(self, key) for key in _HEADER_KEYS}

    @classmethod
    def from_dict(cls, doc: dict) -> "HeaderFields":
        return cls(**{key: doc.get(key) for key in _HEADER_KEYS})


@dataclass
class SeriesEntry:
    """One series of a study: identity, storage locator, optional label."""

    series_uid: str
    headers: HeaderFields
    kind: str = "volume_file"  # "volume_file" | "dicom_dir"
    path: str | None = None
    label: str | None = None

    def to_dict(self) -> dict:
        return {
            "series_uid": self.series_uid,
            "kind": self.kind,
            "path": self.path,
            "label": self.label,
            "headers": self.headers.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SeriesEntry":
        return cls(
            series_uid=doc["series_uid"],
            headers=HeaderFields.from_dict(doc["headers"]),
            kind=doc.get("kind", "volume_file"),
            path=doc.get("path"),
            label=doc.get("label"),
        )


@dataclass
class StudyRecord:
    """All series of one imaging study, flagged when classes are missing."""

    patient_id: str
    study_uid: str
    series: list[SeriesEntry] = field(default_factory=list)
    complete: bool = True
    missing_classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for entry in self.series:
            if entry.headers.patient_id != self.patient_id:
                raise ValueError(
                    f"series {entry.series_uid} patient_id {entry.headers.patient_id!r} "
                    f"does not match study patient {self.patient_id!r}"
                )
            if entry.headers.study_uid != self.study_uid:
                raise ValueError(
                    f"series {entry.series_uid} study_uid {entry.headers.study_uid!r} "
                    f"does not match study {self.study_uid!r}"
                )

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "study_uid": self.study_uid,
            "complete": self.complete,
            "missing_classes": list(self.missing_classes),
            "series": [entry.to_dict() for entry in self.series],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StudyRecord":
        return cls(
            patient_id=doc["patient_id"],
            study_uid=doc["study_uid"],
            series=[SeriesEntry.from_dict(s) for s in doc.get("series", [])],
            complete=doc.get("complete", True),
            missing_classes=list(doc.get("missing_classes", [])),
        )


def write_manifest(records: list[StudyRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False))
            fh.write("\n")
    return path


def read_manifest(path) -> list[StudyRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(StudyRecord.from_dict(json.loads(line)))
    return records


def read_label_sidecar(path) -> dict[str, str]:
    """JSON-lines sidecar: one {"series_uid": ..., "label": ...} per line."""
    labels: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            labels[doc["series_uid"]] = doc["label"]
    return labels


def write_label_sidecar(labels: dict[str, str], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for series_uid in sorted(labels):
            fh.write(json.dumps({"series_uid": series_uid, "label": labels[series_uid]}))
            fh.write("\n")
    return path
