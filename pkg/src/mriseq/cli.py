"""Command line entry point: mriseq <subcommand>.

Exit codes: 0 success, 1 internal error, 2 bad input (missing files,
invalid configuration, empty datasets). Heavy imports (torch) happen
inside the subcommands that need them, so ingest/synth stay snappy.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import (
    ConfigError,
    CorruptCheckpointError,
    EmptyDatasetError,
    FingerprintMismatchError,
    InvalidSpecError,
    MriseqError,
    TooFewForKError,
    TooFewPatientsError,
    UnreadableFileError,
)

DATA_ROOT_ENV = "MRISEQ_DATA_ROOT"

_BAD_INPUT = (
    ConfigError,
    CorruptCheckpointError,
    EmptyDatasetError,
    FingerprintMismatchError,
    InvalidSpecError,
    TooFewForKError,
    TooFewPatientsError,
    UnreadableFileError,
    FileNotFoundError,
    ValueError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mriseq",
        description="MRI series classification pipeline: ingest, synthesize, "
                    "train, predict, evaluate, audit, report.",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress logging")
    parser.add_argument("--json", action="store_true", dest="json_out",
                        help="machine-readable JSON on stdout where applicable")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a dataset tree into a manifest")
    p.add_argument("root", nargs="?", default=None,
                   help=f"dataset root (default: ${DATA_ROOT_ENV})")
    p.add_argument("--out", default="manifest.jsonl", help="output manifest path")
    p.add_argument("--rules", default=None, help="label rule table JSON")
    p.add_argument("--labels", choices=("rules", "sidecar"), default="rules")
    p.add_argument("--label-set", default="body", choices=("body", "brain"))
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth", help="generate a labeled phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=50)
    p.add_argument("--studies-per-patient", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conflict-fraction", type=float, default=0.0)
    p.add_argument("--hard", action="store_true", help="overlap DWI/T2FS signatures")
    p.add_argument("--label-set", default="body", choices=("body", "brain"))
    p.add_argument("--spec", default=None, help="PhantomSpec JSON file (overrides flags)")

    p = sub.add_parser("train", help="run k-fold cross-validation from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override all config seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds")

    p = sub.add_parser("predict", help="classify a volume file")
    p.add_argument("volume")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint path (repeat for an ensemble)")

    p = sub.add_parser("evaluate", help="re-aggregate fold reports of a run directory")
    p.add_argument("run_dir")

    p = sub.add_parser("audit", help="header conflicts and prediction-vs-header audit")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", action="append", default=None,
                   help="enable the prediction audit with these checkpoints")
    p.add_argument("--rules", default=None, help="label rule table JSON")
    p.add_argument("--out", default=None, help="write the audit JSON here")

    p = sub.add_parser("report", help="write summary tables (and plots) for a run")
    p.add_argument("run_dir")
    p.add_argument("--plots", action="store_true")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handler = {
        "ingest": _cmd_ingest,
        "synth": _cmd_synth,
        "train": _cmd_train,
        "predict": _cmd_predict,
        "evaluate": _cmd_evaluate,
        "audit": _cmd_audit,
        "report": _cmd_report,
    }[args.command]
    try:
        return handler(args)
    except _BAD_INPUT as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MriseqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _emit(args, doc: dict, text: str) -> None:
    if args.json_out:
        print(json.dumps(doc, sort_keys=True))
    else:
        print(text)


def _cmd_ingest(args) -> int:
    from .ingest import scan_dataset
    from .labels import load_rule_table
    from .manifest import write_manifest

    root = args.root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"no dataset root given and ${DATA_ROOT_ENV} is not set")
    rules = load_rule_table(args.rules) if args.rules else None
    result = scan_dataset(root, label_source=args.labels, rules=rules,
                          label_set_id=args.label_set, jobs=args.jobs)
    write_manifest(result.records, args.out)
    doc = {
        "manifest": str(args.out),
        "studies": len(result.records),
        "flagged_incomplete": len(result.flagged),
        "rejected_series": len(result.rejected),
    }
    _emit(args, doc, f"wrote {doc['studies']} studies to {args.out} "
                     f"({doc['flagged_incomplete']} flagged incomplete, "
                     f"{doc['rejected_series']} series rejected)")
    return 0


def _cmd_synth(args) -> int:
    from .phantom import PhantomSpec, generate_dataset

    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = PhantomSpec.from_dict(json.load(fh))
    else:
        spec = PhantomSpec(
            label_set_id=args.label_set,
            conflict_fraction=args.conflict_fraction,
            hard_mode=args.hard,
            seed=args.seed,
        )
    records = generate_dataset(spec, args.patients, args.out,
                               studies_per_patient=args.studies_per_patient)
    n_series = sum(len(r.series) for r in records)
    doc = {"out": str(args.out), "studies": len(records), "series": n_series}
    _emit(args, doc, f"generated {len(records)} studies ({n_series} series) under {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .config import load_run_config, save_run_config
    from .ingest import scan_dataset
    from .train import run_cross_validation

    cfg = load_run_config(args.config, seed_override=args.seed)
    data_root = cfg.data_root or os.environ.get(DATA_ROOT_ENV)
    if not data_root:
        raise ConfigError(f"config has no data_root and ${DATA_ROOT_ENV} is not set")
    labels_path = Path(data_root) / "labels.jsonl"
    label_source = "sidecar" if labels_path.is_file() else "rules"
    result = scan_dataset(data_root, label_source=label_source, label_set_id=cfg.label_set)

    run_dir = cfg.resolved_run_dir()
    cv = run_cross_validation(
        result.records, cfg.k, cfg.model, cfg.train, cfg.split,
        cfg.preprocess, cfg.label_set, run_dir, jobs=args.jobs,
    )
    save_run_config(cfg, run_dir / "config.json")
    mean_f1 = cv.ensemble.mean["weighted_f1"]
    lo, hi = cv.ensemble.fold_range["weighted_f1"]
    doc = {
        "run_dir": str(run_dir),
        "folds": cfg.k,
        "weighted_f1_mean": mean_f1,
        "weighted_f1_range": [lo, hi],
    }
    from .report import format_percent_range

    _emit(args, doc, f"run complete: {run_dir}\nweighted F1 "
                     f"{format_percent_range(mean_f1, lo, hi)}")
    return 0


def _cmd_predict(args) -> int:
    from .nifti import read_volume
    from .predict import predict_volume, probabilities_as_dict

    volume = read_volume(args.volume)
    label, probabilities = predict_volume(args.checkpoint, volume)
    doc = {
        "label": label.value,
        "label_set": label.label_set_id,
        "class_index": label.class_index,
        "probabilities": probabilities_as_dict(label.label_set_id, probabilities),
    }
    print(json.dumps(doc, sort_keys=True))
    return 0


def _cmd_evaluate(args) -> int:
    from .report import rebuild_ensemble, summary_text

    ensemble = rebuild_ensemble(args.run_dir)
    doc = {"run_dir": args.run_dir, "mean": ensemble.mean,
           "fold_range": {k: list(v) for k, v in ensemble.fold_range.items()}}
    _emit(args, doc, summary_text(ensemble))
    return 0


def _cmd_audit(args) -> int:
    from .audit import ConflictRules, audit_consistency, detect_conflicts, load_anatomy_lexicon
    from .labels import UNKNOWN, default_rule_table, infer_label_from_headers, load_rule_table
    from .manifest import read_manifest

    records = read_manifest(args.manifest)
    if not records:
        raise EmptyDatasetError(f"manifest {args.manifest} is empty")

    label_set_id = "body"
    if args.checkpoint:
        from .checkpoint import read_metadata

        label_set_id = read_metadata(args.checkpoint[0])["label_set_id"]
    rules = load_rule_table(args.rules) if args.rules else default_rule_table(label_set_id)
    conflict_rules = ConflictRules(lexicon=load_anatomy_lexicon(), label_rules=rules)

    conflict_reports = [detect_conflicts(record, conflict_rules) for record in records]
    doc = {
        "header_conflicts": [r.to_dict() for r in conflict_reports if not r.passed],
        "n_studies": len(records),
        "n_studies_with_conflicts": sum(1 for r in conflict_reports if r.conflicts()),
    }

    if args.checkpoint:
        from .checkpoint import load_checkpoint
        from .nifti import read_volume
        from .predict import predict_volume, probabilities_as_dict

        loaded = [load_checkpoint(p) for p in args.checkpoint]
        predictions = {}
        header_labels = {}
        for record in records:
            for entry in record.series:
                if entry.kind != "volume_file" or not entry.path:
                    continue
                volume = read_volume(entry.path)
                label, probs = predict_volume(loaded, volume)
                predictions[entry.series_uid] = (
                    label.value, probabilities_as_dict(label.label_set_id, probs)
                )
                inferred = infer_label_from_headers(entry.headers, rules)
                header_labels[entry.series_uid] = (
                    UNKNOWN if inferred == UNKNOWN else inferred.value
                )
        audit = audit_consistency(predictions, header_labels)
        doc["consistency"] = audit.to_dict()

    payload = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
        _emit(args, {"out": args.out, **{k: v for k, v in doc.items()
                                         if k != "header_conflicts"}},
              f"audit written to {args.out} "
              f"({doc['n_studies_with_conflicts']}/{doc['n_studies']} studies "
              f"with header conflicts)")
    else:
        print(payload, end="")
    return 0


def _cmd_report(args) -> int:
    from .report import write_report

    outputs = write_report(args.run_dir, plots=args.plots)
    summary = Path(outputs["summary"]).read_text(encoding="utf-8")
    if args.json_out:
        print(json.dumps({k: str(v) for k, v in outputs.items()}, sort_keys=True))
    else:
        print(summary, end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
