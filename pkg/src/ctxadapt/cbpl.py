"""Class-balanced pseudo-label filtering.

Each class gets its own threshold: the lower of the global threshold and the
lowest confidence among the top ``retention_ratio`` fraction of samples
predicted as that class. A sample is kept when its confidence reaches its
class threshold.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ParameterError

CONFIDENCE_SOURCES = ("probability", "logit")


@dataclass(frozen=True)
class CbplConfig:
    global_threshold: float = 0.75
    retention_ratio: float = 0.75
    # "probability": max softmax probability; "logit": raw max logit
    confidence_source: str = "probability"

    def __post_init__(self):
        if not 0 < self.global_threshold <= 1:
            raise ParameterError(f"global_threshold must lie in (0, 1], got {self.global_threshold}")
        if not 0 < self.retention_ratio <= 1:
            raise ParameterError(f"retention_ratio must lie in (0, 1], got {self.retention_ratio}")
        if self.confidence_source not in CONFIDENCE_SOURCES:
            raise ParameterError(f"confidence_source must be one of {CONFIDENCE_SOURCES}")


@dataclass
class FilteredDataset:
    """Indices (into the source feature matrix) of retained samples.

    ``thresholds[k]`` is ``None`` for classes that no sample was predicted as.
    """

    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    thresholds: list
    num_classes: int

    def __len__(self):
        return len(self.indices)

    @property
    def empty_classes(self):
        return [k for k, t in enumerate(self.thresholds) if t is None]


def keep_count(ratio, size):
    """Number of top samples that set a class's retention threshold: ceil(ratio * size), at least 1."""
    if size == 0:
        return 0
    # round first so 0.2 * 5 = 1.0000000000000002 does not ceil to 2
    return max(1, math.ceil(round(ratio * size, 9)))


def cbpl_filter(preds, config, num_classes=None):
    """Filter predictions into a class-balanced pseudo-labelled set.

    Args:
        preds: a :class:`~ctxadapt.classifier.Predictions` batch.
        config: thresholds to apply.
        num_classes: defaults to the width of ``preds.probabilities``.

    Returns:
        FilteredDataset with indices sorted ascending.
    """
    n = len(preds)
    if n == 0:
        raise EmptyInputError("no predictions to filter")
    if num_classes is None:
        num_classes = preds.num_classes
    labels = np.asarray(preds.labels)
    if config.confidence_source == "logit":
        conf = np.asarray(preds.max_logits, dtype=np.float64)
    else:
        conf = np.asarray(preds.confidences, dtype=np.float64)
    global_threshold = config.global_threshold

    thresholds = []
    keep = np.zeros(n, dtype=bool)
    for k in range(num_classes):
        members = np.flatnonzero(labels == k)
        if members.size == 0:
            thresholds.append(None)
            continue
        # stable sort on -conf: descending confidence, lower index first on ties
        order = members[np.argsort(-conf[members], kind="stable")]
        cutoff = conf[order[keep_count(config.retention_ratio, members.size) - 1]]
        threshold = min(global_threshold, float(cutoff))
        thresholds.append(threshold)
        keep[members[conf[members] >= threshold]] = True

    idx = np.flatnonzero(keep)
    return FilteredDataset(idx, labels[idx].copy(), conf[idx], thresholds, num_classes)


def class_histogram(ds, num_classes=None):
    if num_classes is None:
        num_classes = ds.num_classes
    return np.bincount(np.asarray(ds.labels, dtype=np.int64), minlength=num_classes)[:num_classes]
