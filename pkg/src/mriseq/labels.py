"""Label-set profiles and header-based label inference.

Two profiles ship with the package: ``body`` (VDCE, T2W, T2FS, DWI, ADC)
and ``brain`` (T1, T1CE, T2, FLAIR). Labels inferred from headers are a
bootstrap, not ground truth: rule tables are editable JSON shipped in
``mriseq/data`` and can be replaced per run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

from .errors import ConfigError

PROFILES = {
    "body": ("VDCE", "T2W", "T2FS", "DWI", "ADC"),
    "brain": ("T1", "T1CE", "T2", "FLAIR"),
}

UNKNOWN = "Unknown"


@dataclass(frozen=True)
class SequenceLabel:
    """One class of a label-set profile, with its profile-defined ordinal."""

    label_set_id: str
    value: str
    class_index: int

    def __post_init__(self):
        classes = PROFILES.get(self.label_set_id)
        if classes is None:
            raise ConfigError(f"unknown label set '{self.label_set_id}'")
        if self.value not in classes:
            raise ConfigError(f"'{self.value}' is not a class of label set '{self.label_set_id}'")
        if self.class_index != classes.index(self.value):
            raise ConfigError(
                f"class_index {self.class_index} does not match ordinal of '{self.value}'"
            )


def label_classes(label_set_id: str) -> tuple[str, ...]:
    try:
        return PROFILES[label_set_id]
    except KeyError:
        raise ConfigError(f"unknown label set '{label_set_id}'") from None


def make_label(label_set_id: str, value: str) -> SequenceLabel:
    classes = label_classes(label_set_id)
    if value not in classes:
        raise ConfigError(f"'{value}' is not a class of label set '{label_set_id}'")
    return SequenceLabel(label_set_id, value, classes.index(value))


@dataclass(frozen=True)
class LabelRule:
    """One entry of an ordered first-match-wins rule table.

    A rule matches when any of its lowercase substring patterns occurs in
    the series description or protocol name (an empty pattern list matches
    any text), and, when a b-value bound is set, the header carries a
    b-value within it.
    """

    label: str
    patterns: tuple[str, ...]
    b_value_min: float | None = None
    b_value_max: float | None = None

    def matches(self, text: str, b_value: float | None) -> bool:
        if self.patterns and not any(p in text for p in self.patterns):
            return False
        if self.b_value_min is not None and (b_value is None or b_value < self.b_value_min):
            return False
        if self.b_value_max is not None and (b_value is None or b_value > self.b_value_max):
            return False
        return True


@dataclass(frozen=True)
class RuleTable:
    label_set_id: str
    rules: tuple[LabelRule, ...]

    def __post_init__(self):
        classes = label_classes(self.label_set_id)
        for rule in self.rules:
            if rule.label not in classes:
                raise ConfigError(
                    f"rule label '{rule.label}' is not in label set '{self.label_set_id}'"
                )


def _table_from_dict(doc: dict) -> RuleTable:
    try:
        label_set = doc["label_set"]
        raw_rules = doc["rules"]
    except (KeyError, TypeError):
        raise ConfigError("rule table must have 'label_set' and 'rules' keys") from None
    rules = []
    for entry in raw_rules:
        known = {"label", "patterns", "b_value_min", "b_value_max"}
        for key in entry:
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in rule table entry")
        rules.append(
            LabelRule(
                label=entry["label"],
                patterns=tuple(p.lower() for p in entry.get("patterns", [])),
                b_value_min=entry.get("b_value_min"),
                b_value_max=entry.get("b_value_max"),
            )
        )
    return RuleTable(label_set, tuple(rules))


def load_rule_table(path) -> RuleTable:
    """Load a rule table from a JSON file (see data/body_rules.json)."""
    with open(path, "r", encoding="utf-8") as fh:
        return _table_from_dict(json.load(fh))


def default_rule_table(label_set_id: str) -> RuleTable:
    name = {"body": "body_rules.json", "brain": "brain_rules.json"}.get(label_set_id)
    if name is None:
        raise ConfigError(f"no default rule table for label set '{label_set_id}'")
    text = resources.files("mriseq.data").joinpath(name).read_text(encoding="utf-8")
    return _table_from_dict(json.loads(text))


def infer_label_from_headers(headers, table: RuleTable) -> SequenceLabel | str:
    """Map header text to a label by first matching rule; UNKNOWN if none match.

    Total and deterministic: never raises on unmatched input, never guesses.
    """
    text_parts = []
    for attr in ("series_description", "protocol_name"):
        value = getattr(headers, attr, None)
        if value:
            text_parts.append(value.lower())
    text = " ".join(text_parts)
    b_value = getattr(headers, "b_value", None)
    for rule in table.rules:
        if rule.matches(text, b_value):
            return make_label(table.label_set_id, rule.label)
    return UNKNOWN
