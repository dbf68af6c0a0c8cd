"""Run configuration: one strict JSON file drives a whole experiment.

Unknown keys are rejected rather than ignored, because a silently
misspelled key in a training config is the cheapest way to lose a week.
A top-level "seed" fills in the per-section seeds (split, model, train)
wherever those sections do not set their own.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .labels import label_classes
from .models import ModelConfig, model_config
from .preprocess import PreprocessConfig
from .split import SplitSpec
from .train import TrainConfig

_TOP_KEYS = {
    "label_set", "data_root", "run_dir", "k", "seed",
    "split", "preprocess", "model", "train",
}
_SPLIT_KEYS = {"ratios", "seed"}
_PREPROCESS_KEYS = {"target_spacing", "target_shape", "percentile_window",
                    "pad_value", "interpolation"}
_MODEL_KEYS = {"preset", "family", "block_layers", "growth_rate", "init_features",
               "num_classes", "in_channels", "input_shape", "seed"}
_TRAIN_KEYS = {"batch_size", "learning_rate", "epochs", "loss", "optimizer", "seed"}


def _check_keys(doc: dict, allowed: set, section: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in {section} config")


@dataclass
class RunConfig:
    label_set: str = "body"
    data_root: str | None = None
    run_dir: str | None = None
    k: int = 5
    seed: int = 0
    split: SplitSpec = field(default_factory=SplitSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        label_classes(self.label_set)  # validates the profile name
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.model.num_classes != len(label_classes(self.label_set)):
            raise ConfigError(
                f"model num_classes {self.model.num_classes} does not match label set "
                f"'{self.label_set}' ({len(label_classes(self.label_set))} classes)"
            )

    def to_dict(self) -> dict:
        return {
            "label_set": self.label_set,
            "data_root": self.data_root,
            "run_dir": self.run_dir,
            "k": self.k,
            "seed": self.seed,
            "split": self.split.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "model": self.model.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items()
                      if k not in ("adam_betas", "adam_eps")},
        }

    def fingerprint(self) -> str:
        import hashlib

        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def resolved_run_dir(self) -> Path:
        if self.run_dir:
            return Path(self.run_dir)
        return Path("runs") / f"run-{self.fingerprint()[:12]}"


def run_config_from_dict(doc: dict, seed_override: int | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "run")
    master_seed = doc.get("seed", 0)
    if seed_override is not None:
        master_seed = seed_override

    split_doc = dict(doc.get("split", {}))
    _check_keys(split_doc, _SPLIT_KEYS, "split")
    if seed_override is not None or "seed" not in split_doc:
        split_doc["seed"] = master_seed

    pp_doc = dict(doc.get("preprocess", {}))
    _check_keys(pp_doc, _PREPROCESS_KEYS, "preprocess")

    model_doc = dict(doc.get("model", {}))
    _check_keys(model_doc, _MODEL_KEYS, "model")
    preset = model_doc.pop("preset", None)
    if seed_override is not None or "seed" not in model_doc:
        model_doc["seed"] = master_seed

    train_doc = dict(doc.get("train", {}))
    _check_keys(train_doc, _TRAIN_KEYS, "train")
    if seed_override is not None or "seed" not in train_doc:
        train_doc["seed"] = master_seed

    label_set = doc.get("label_set", "body")
    if "num_classes" not in model_doc:
        model_doc["num_classes"] = len(label_classes(label_set))

    try:
        split = SplitSpec.from_dict(split_doc)
        preprocess = PreprocessConfig.from_dict(pp_doc)
        model = model_config(preset, **model_doc) if preset else ModelConfig.from_dict(model_doc)
        train = TrainConfig.from_dict(train_doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        label_set=label_set,
        data_root=doc.get("data_root"),
        run_dir=doc.get("run_dir"),
        k=doc.get("k", 5),
        seed=master_seed,
        split=split,
        preprocess=preprocess,
        model=model,
        train=train,
    )


def load_run_config(path, seed_override: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(doc, seed_override=seed_override)


def save_run_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
