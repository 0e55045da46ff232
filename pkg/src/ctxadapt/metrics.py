"""Per-class top-1 accuracy and the base-to-new harmonic-mean protocol."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SplitError

SPLIT_SCHEMES = (
    "first-half",
    "parity",
    "accuracy-ranked",
    "swapped-first-half",
    "swapped-parity",
    "swapped-accuracy-ranked",
)


@dataclass
class EvalResult:
    """Accuracies in [0, 1].

    ``per_class_accuracy`` is NaN for classes absent from the ground truth;
    ``average`` is the unweighted mean over the other classes and
    ``overall`` the plain fraction of correct samples.
    """

    per_class_accuracy: np.ndarray
    average: float
    overall: float
    n_per_class: np.ndarray
    correct_per_class: np.ndarray

    def to_dict(self):
        return {
            "average_accuracy": self.average,
            "overall_sample_accuracy": self.overall,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy],
            "n_per_class": [int(n) for n in self.n_per_class],
            "correct_per_class": [int(c) for c in self.correct_per_class],
        }


@dataclass
class BaseNewResult:
    base_accuracy: float
    new_accuracy: float
    harmonic_mean: float

    def to_dict(self):
        return {
            "base_accuracy": self.base_accuracy,
            "new_accuracy": self.new_accuracy,
            "harmonic_mean": self.harmonic_mean,
        }


def evaluate(preds, truth, num_classes=None):
    """Top-1 accuracy per class.

    ``preds`` may be a Predictions batch or a plain array of labels.
    """
    labels = np.asarray(getattr(preds, "labels", preds), dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if labels.shape != truth.shape:
        raise ShapeError(f"{labels.size} predictions vs {truth.size} ground-truth labels")
    if num_classes is None:
        num_classes = getattr(preds, "num_classes", None)
        if num_classes is None:
            num_classes = int(max(labels.max(initial=-1), truth.max(initial=-1))) + 1
    n = np.bincount(truth, minlength=num_classes)
    correct = np.bincount(truth[labels == truth], minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(n > 0, correct / np.maximum(n, 1), np.nan)
    present = n > 0
    average = float(per_class[present].mean()) if present.any() else 0.0
    overall = float(correct.sum() / truth.size) if truth.size else 0.0
    return EvalResult(per_class, average, overall, n, correct)


def harmonic_mean(a, b):
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def base_to_new_split(class_names, scheme, zero_shot=None):
    """Split class indices into ``(base, new)`` lists.

    ``first-half``: the first ``C // 2`` classes are base. ``parity``: even
    indices are base. ``accuracy-ranked``: the ``C // 2`` classes with the
    highest zero-shot accuracy are base (needs ``zero_shot``, an EvalResult;
    ties go to the lower index). ``swapped-*`` exchange base and new.
    """
    c = len(class_names)
    if c < 2:
        raise SplitError("base-to-new needs at least two classes")
    if scheme not in SPLIT_SCHEMES:
        raise SplitError(f"unknown split scheme {scheme!r}; expected one of {', '.join(SPLIT_SCHEMES)}")
    swapped = scheme.startswith("swapped-")
    core = scheme[len("swapped-"):] if swapped else scheme
    half = c // 2
    if core == "first-half":
        base = list(range(half))
    elif core == "parity":
        base = list(range(0, c, 2))
    else:
        if zero_shot is None:
            raise SplitError("accuracy-ranked split needs zero-shot per-class accuracies")
        acc = np.nan_to_num(np.asarray(zero_shot.per_class_accuracy, dtype=np.float64), nan=-1.0)
        if acc.shape != (c,):
            raise SplitError(f"zero-shot accuracies cover {acc.size} classes, expected {c}")
        order = sorted(range(c), key=lambda k: (-acc[k], k))
        base = sorted(order[:half])
    new = [k for k in range(c) if k not in set(base)]
    return (new, base) if swapped else (base, new)
