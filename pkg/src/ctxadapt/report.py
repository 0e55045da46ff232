"""JSON adaptation report and its per-class TSV companion.

Key order is fixed by construction, so emitting, reloading and re-emitting a
report reproduces it byte for byte.
"""

import csv
import io
import json
import math

import numpy as np

from .cbpl import class_histogram

REPORT_FORMAT = "ctxadapt-report"
REPORT_VERSION = 1

REQUIRED_KEYS = ("format", "version", "command", "config", "inputs")


def _clean(obj):
    """Convert numpy values to plain JSON types; NaN and inf become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def pseudo_label_section(dataset, class_names, truth=None):
    section = {
        "num_retained": len(dataset),
        "thresholds": {name: t for name, t in zip(class_names, dataset.thresholds)},
        "class_histogram": {name: int(c) for name, c in zip(class_names, class_histogram(dataset))},
        "empty_classes": [class_names[k] for k in dataset.empty_classes],
    }
    if truth is not None:
        truth = np.asarray(truth)[dataset.indices]
        section["pseudo_label_accuracy"] = float((truth == dataset.labels).mean()) if len(dataset) else None
    return section


def build_report(
    command,
    config,
    inputs,
    pseudo_labels=None,
    trace=None,
    evaluation=None,
    base_to_new=None,
    extra=None,
):
    """Assemble the report dictionary.

    ``evaluation`` maps a name (``"zero_shot"``, ``"adapted"``...) to an
    EvalResult; ``base_to_new`` is a BaseNewResult plus its scheme.
    """
    report = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "command": command,
        "config": config,
        "inputs": inputs,
    }
    if pseudo_labels is not None:
        report["pseudo_labels"] = pseudo_labels
    if trace is not None:
        report["trace"] = trace
    if evaluation is not None:
        report["evaluation"] = {name: res.to_dict() for name, res in evaluation.items()}
    if base_to_new is not None:
        scheme, result = base_to_new
        report["base_to_new"] = {"scheme": scheme, **result.to_dict()}
    if extra:
        report.update(extra)
    return _clean(report)


def dumps_report(report):
    return json.dumps(_clean(report), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def emit_report(report, path):
    text = dumps_report(report)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        report = json.load(fh)
    missing = [k for k in REQUIRED_KEYS if k not in report]
    if missing or report.get("format") != REPORT_FORMAT:
        raise ValueError(f"not a {REPORT_FORMAT} file (missing {missing})")
    return report


def per_class_table(class_names, evaluation, thresholds=None, histogram=None):
    """Tab-separated per-class rows: counts, accuracies, threshold, retained."""
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    names = list(evaluation)
    header = ["class", "n"] + [f"acc_{name}" for name in names]
    if thresholds is not None:
        header.append("threshold")
    if histogram is not None:
        header.append("retained")
    writer.writerow(header)
    first = evaluation[names[0]]
    for k, cls in enumerate(class_names):
        row = [cls, int(first.n_per_class[k])]
        for name in names:
            acc = evaluation[name].per_class_accuracy[k]
            row.append("" if np.isnan(acc) else f"{acc:.6f}")
        if thresholds is not None:
            row.append("" if thresholds[k] is None else f"{thresholds[k]:.6f}")
        if histogram is not None:
            row.append(int(histogram[k]))
        writer.writerow(row)
    writer.writerow(["average", int(sum(first.n_per_class))] + [f"{evaluation[n].average:.6f}" for n in names])
    return buf.getvalue()
