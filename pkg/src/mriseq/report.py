"""Human-readable summaries, CSV exports, and optional plots for a run."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .metrics import ConfusionMatrix, EnsembleReport, MetricsReport, misclassification_report


def format_percent_range(mean: float, lo: float, hi: float) -> str:
    """Render e.g. 0.995, 0.9929, 0.9971 as '99.50% (99.29%-99.71%)'."""
    return f"{mean * 100:.2f}% ({lo * 100:.2f}%-{hi * 100:.2f}%)"


def _load_fold_reports(run_dir: Path):
    docs = []
    for fold_dir in sorted(run_dir.glob("fold*")):
        report_path = fold_dir / "test_report.json"
        if report_path.is_file():
            with open(report_path, "r", encoding="utf-8") as fh:
                docs.append(json.load(fh))
    return docs


def rebuild_ensemble(run_dir) -> EnsembleReport:
    """Aggregate the persisted per-fold test reports of a run directory."""
    from .metrics import ensemble_metrics

    run_dir = Path(run_dir)
    docs = _load_fold_reports(run_dir)
    if not docs:
        raise FileNotFoundError(f"no fold test reports under {run_dir}")
    reports = [MetricsReport.from_dict(doc["metrics"]) for doc in docs]
    ensemble = ensemble_metrics(reports)
    with open(run_dir / "ensemble.json", "w", encoding="utf-8") as fh:
        json.dump(ensemble.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ensemble


def summary_text(ensemble: EnsembleReport, model_name: str = "model") -> str:
    """Deterministic text table: fold means with (min%-max%) ranges."""
    lines = []
    lines.append(f"5-fold ensemble summary [{model_name}], label set "
                 f"'{ensemble.label_set_id}', k={ensemble.k}")
    lines.append("")
    lines.append("headline (support-weighted):")
    header = f"  {'metric':<12}{'mean (fold min-max)':<28}{'normal-approx 95% CI':<24}"
    lines.append(header)
    for name, key in (
        ("accuracy", "accuracy"),
        ("precision", "weighted_precision"),
        ("recall", "weighted_recall"),
        ("f1", "weighted_f1"),
    ):
        mean = ensemble.mean[key]
        lo, hi = ensemble.fold_range[key]
        ci_lo, ci_hi = ensemble.ci95[key]
        lines.append(
            f"  {name:<12}{format_percent_range(mean, lo, hi):<28}"
            f"[{ci_lo * 100:.2f}%, {ci_hi * 100:.2f}%]"
        )
    lines.append("")
    lines.append("macro averages:")
    for name, key in (("precision", "macro_precision"), ("recall", "macro_recall"),
                      ("f1", "macro_f1")):
        mean = ensemble.mean[key]
        lo, hi = ensemble.fold_range[key]
        lines.append(f"  {name:<12}{format_percent_range(mean, lo, hi)}")

    if ensemble.aggregate_confusion is not None:
        cm = ensemble.aggregate_confusion
        lines.append("")
        lines.append(f"aggregate confusion matrix ({cm.n_samples} classifications, "
                     f"rows = truth):")
        classes = cm.classes
        width = max(6, max(len(c) for c in classes) + 1)
        lines.append("  " + " " * width + "".join(f"{c:>{width}}" for c in classes))
        for i, name in enumerate(classes):
            row = "".join(f"{int(v):>{width}}" for v in cm.counts[i])
            lines.append(f"  {name:<{width}}" + row)
        misses = misclassification_report(cm)
        if misses:
            lines.append("")
            lines.append("misclassifications (desc):")
            for item in misses:
                lines.append(f"  {item['true']} -> {item['predicted']}: {item['count']}")
    lines.append("")
    return "\n".join(lines)


def write_confusion_csv(cm: ConfusionMatrix, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted", *cm.classes])
        for i, name in enumerate(cm.classes):
            writer.writerow([name, *[int(v) for v in cm.counts[i]]])
    return path


def write_report(run_dir, plots: bool = False, model_name: str | None = None) -> dict:
    """Write summary.txt, aggregate confusion CSV, misclassification JSON,
    and (optionally) PNG plots under <run_dir>/report/."""
    run_dir = Path(run_dir)
    ensemble = rebuild_ensemble(run_dir)
    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    if model_name is None:
        run_json = run_dir / "run.json"
        model_name = "model"
        if run_json.is_file():
            with open(run_json, "r", encoding="utf-8") as fh:
                model_doc = json.load(fh).get("model", {})
            model_name = f"{model_doc.get('family', 'model')}-{model_doc.get('block_layers')}"

    text = summary_text(ensemble, model_name)
    (report_dir / "summary.txt").write_text(text, encoding="utf-8")

    outputs = {"summary": report_dir / "summary.txt", "ensemble": run_dir / "ensemble.json"}

    if ensemble.aggregate_confusion is not None:
        outputs["confusion_csv"] = write_confusion_csv(
            ensemble.aggregate_confusion, report_dir / "confusion_aggregate.csv"
        )
        pairs = []
        for doc in _load_fold_reports(run_dir):
            classes = ensemble.aggregate_confusion.classes
            for row in doc.get("per_series", []):
                pairs.append(
                    (classes.index(row["true"]), classes.index(row["predicted"]),
                     row["series_uid"])
                )
        misses = misclassification_report(ensemble.aggregate_confusion, pairs)
        with open(report_dir / "misclassifications.json", "w", encoding="utf-8") as fh:
            json.dump(misses, fh, indent=2)
            fh.write("\n")
        outputs["misclassifications"] = report_dir / "misclassifications.json"

    if plots:
        outputs.update(_write_plots(ensemble, report_dir))
    return outputs


def _write_plots(ensemble: EnsembleReport, report_dir: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outputs = {}
    if ensemble.aggregate_confusion is not None:
        cm = ensemble.aggregate_confusion
        fig, ax = plt.subplots(figsize=(5, 4.2))
        image = ax.imshow(cm.counts, cmap="Blues")
        ax.set_xticks(range(len(cm.classes)), cm.classes, rotation=45, ha="right")
        ax.set_yticks(range(len(cm.classes)), cm.classes)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        vmax = cm.counts.max() or 1
        for i in range(len(cm.classes)):
            for j in range(len(cm.classes)):
                ax.text(j, i, int(cm.counts[i, j]), ha="center", va="center",
                        color="white" if cm.counts[i, j] > vmax / 2 else "black",
                        fontsize=8)
        fig.colorbar(image, ax=ax, shrink=0.8)
        fig.tight_layout()
        path = report_dir / "confusion_matrix.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        outputs["confusion_plot"] = path

    names = ["accuracy", "weighted_precision", "weighted_recall", "weighted_f1"]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    k = ensemble.k
    x = np.arange(k)
    width = 0.8 / len(names)
    for i, name in enumerate(names):
        values = [
            r.accuracy if name == "accuracy" else r.weighted[name.split("_", 1)[1]]
            for r in ensemble.fold_reports
        ]
        ax.bar(x + i * width, values, width, label=name.replace("weighted_", ""))
    ax.set_xticks(x + 0.4 - width / 2, [f"fold {i}" for i in range(k)])
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, ncol=4)
    ax.set_ylabel("score")
    fig.tight_layout()
    path = report_dir / "fold_metrics.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    outputs["fold_plot"] = path
    return outputs
