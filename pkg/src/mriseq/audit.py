"""Header conflict detection and prediction-vs-header consistency audits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .labels import UNKNOWN, RuleTable, default_rule_table, infer_label_from_headers
from .manifest import HeaderFields, StudyRecord

SEVERITY_WARNING = "warning"
SEVERITY_CONFLICT = "conflict"

RULE_BODY_VS_PROCEDURE = "a-body-vs-procedure"
RULE_DESC_VS_PROTOCOL = "b-description-vs-protocol"
RULE_MISSING_FIELD = "c-missing-field"

DEFAULT_REQUIRED_FIELDS = ("body_part_examined", "series_description")


def load_anatomy_lexicon(path=None) -> dict[str, tuple[str, ...]]:
    """Region -> keyword synonyms used by the body-part conflict rule."""
    if path is None:
        text = resources.files("mriseq.data").joinpath("anatomy_lexicon.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    doc = json.loads(text)
    return {region: tuple(w.lower() for w in words) for region, words in doc.items()}


@dataclass(frozen=True)
class Finding:
    severity: str
    rule: str
    series_uid: str
    fields: tuple[str, ...]
    message: str

    def to_dict(self) -> dict:
        return {
            "severity": self.severity,
            "rule": self.rule,
            "series_uid": self.series_uid,
            "fields": list(self.fields),
            "message": self.message,
        }


@dataclass
class ConflictReport:
    study_uid: str
    findings: list[Finding] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.findings

    def conflicts(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == SEVERITY_CONFLICT]

    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity == SEVERITY_WARNING]

    def to_dict(self) -> dict:
        return {
            "study_uid": self.study_uid,
            "passed": self.passed,
            "findings": [f.to_dict() for f in self.findings],
        }


@dataclass
class ConflictRules:
    """Which checks run, and the vocabulary they use."""

    lexicon: dict[str, tuple[str, ...]]
    label_rules: RuleTable
    required_fields: tuple[str, ...] = DEFAULT_REQUIRED_FIELDS
    enabled: tuple[str, ...] = (
        RULE_BODY_VS_PROCEDURE,
        RULE_DESC_VS_PROTOCOL,
        RULE_MISSING_FIELD,
    )

    @classmethod
    def default(cls, label_set_id: str = "body") -> "ConflictRules":
        return cls(lexicon=load_anatomy_lexicon(), label_rules=default_rule_table(label_set_id))


def regions_in(text: str | None, lexicon: dict[str, tuple[str, ...]]) -> set[str]:
    """Anatomical regions whose synonyms occur in the text (case-insensitive).

    Unknown words simply contribute nothing, so unrecognized vocabulary can
    never fire a conflict.
    """
    if not text:
        return set()
    lowered = text.lower()
    return {region for region, words in lexicon.items() if any(w in lowered for w in words)}


def detect_conflicts(study: StudyRecord, rules: ConflictRules | None = None) -> ConflictReport:
    """Apply the enabled header-consistency rules to every series of a study.

    Findings come back in deterministic order: rule id first, then
    series_uid.
    """
    if not study.series:
        raise ValueError(f"study {study.study_uid} has no series")
    if rules is None:
        rules = ConflictRules.default()

    findings: list[Finding] = []
    for entry in sorted(study.series, key=lambda e: e.series_uid):
        h = entry.headers
        if RULE_BODY_VS_PROCEDURE in rules.enabled:
            body_regions = regions_in(h.body_part_examined, rules.lexicon)
            proc_regions = regions_in(h.procedure_step_description, rules.lexicon)
            if body_regions and proc_regions and body_regions.isdisjoint(proc_regions):
                findings.append(
                    Finding(
                        SEVERITY_CONFLICT,
                        RULE_BODY_VS_PROCEDURE,
                        entry.series_uid,
                        ("body_part_examined", "procedure_step_description"),
                        f"body part {h.body_part_examined!r} indicates "
                        f"{'/'.join(sorted(body_regions))} but procedure step "
                        f"{h.procedure_step_description!r} indicates "
                        f"{'/'.join(sorted(proc_regions))}",
                    )
                )
        if RULE_DESC_VS_PROTOCOL in rules.enabled:
            desc_label = _label_from_single_field(h, "series_description", rules.label_rules)
            proto_label = _label_from_single_field(h, "protocol_name", rules.label_rules)
            if desc_label != UNKNOWN and proto_label != UNKNOWN and desc_label != proto_label:
                findings.append(
                    Finding(
                        SEVERITY_CONFLICT,
                        RULE_DESC_VS_PROTOCOL,
                        entry.series_uid,
                        ("series_description", "protocol_name"),
                        f"series description implies {desc_label} but protocol "
                        f"name implies {proto_label}",
                    )
                )
        if RULE_MISSING_FIELD in rules.enabled:
            for name in rules.required_fields:
                if getattr(h, name, None) is None:
                    findings.append(
                        Finding(
                            SEVERITY_WARNING,
                            RULE_MISSING_FIELD,
                            entry.series_uid,
                            (name,),
                            f"required header field {name} is absent",
                        )
                    )

    findings.sort(key=lambda f: (f.rule, f.series_uid, f.fields))
    return ConflictReport(study_uid=study.study_uid, findings=findings)


def _label_from_single_field(h: HeaderFields, attr: str, table: RuleTable) -> str:
    # text-only probe: the b-value is deliberately left out so that
    # b-value-keyed rules cannot mask a textual disagreement
    value = getattr(h, attr)
    if not value:
        return UNKNOWN
    probe = HeaderFields(
        patient_id=h.patient_id,
        study_uid=h.study_uid,
        series_uid=h.series_uid,
        **{attr: value},
    )
    result = infer_label_from_headers(probe, table)
    return result if result == UNKNOWN else result.value


AUDIT_AGREE = "agree"
AUDIT_DISAGREE = "disagree"
AUDIT_HEADER_UNKNOWN = "header-unknown"


@dataclass
class AuditReport:
    """Prediction vs header-inferred label, series by series."""

    entries: list[dict]
    summary: dict

    def to_dict(self) -> dict:
        return {"summary": self.summary, "series": self.entries}


def audit_consistency(predictions: dict, header_labels: dict) -> AuditReport:
    """Compare model predictions against header-rule labels per series.

    predictions: series_uid -> (label value, per-class probability mapping)
    header_labels: series_uid -> label value or labels.UNKNOWN

    A header-side UNKNOWN is never counted as a disagreement.
    """
    if set(predictions) != set(header_labels):
        raise ValueError("predictions and header labels cover different series sets")

    entries = []
    counts = {AUDIT_AGREE: 0, AUDIT_DISAGREE: 0, AUDIT_HEADER_UNKNOWN: 0}
    for series_uid in sorted(predictions):
        predicted, probabilities = predictions[series_uid]
        header = header_labels[series_uid]
        if header == UNKNOWN or header is None:
            status = AUDIT_HEADER_UNKNOWN
        elif header == predicted:
            status = AUDIT_AGREE
        else:
            status = AUDIT_DISAGREE
        counts[status] += 1
        entry = {
            "series_uid": series_uid,
            "status": status,
            "predicted": predicted,
            "header": None if header == UNKNOWN else header,
        }
        if status == AUDIT_DISAGREE:
            entry["probabilities"] = {k: round(float(v), 6) for k, v in probabilities.items()}
        entries.append(entry)
    summary = {"n_series": len(entries), **counts}
    return AuditReport(entries=entries, summary=summary)
