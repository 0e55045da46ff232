"""Prototype (text-embedding) classifier over image embeddings."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .numeric import softmax

NORM_EPS = 1e-12
PROTOTYPE_NORM_TOL = 1e-5
DEFAULT_TAU = 0.01


def normalize_rows(m):
    """Unit-L2-normalize each row.

    Returns ``(normalized, degenerate)`` where ``degenerate`` flags rows whose
    norm was below ``1e-12``; those rows come back as zeros.
    """
    m = np.asarray(m)
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    degenerate = norms[:, 0] < NORM_EPS
    safe = np.where(degenerate[:, None], 1, norms).astype(m.dtype)
    out = m / safe
    out[degenerate] = 0
    return out, degenerate


def normalize_rows_backward(x, y, grad_y):
    """Gradient of ``y = x / ||x||`` row-wise, given the forward input and output."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norms = np.where(norms < NORM_EPS, 1, norms).astype(x.dtype)
    return (grad_y - y * (y * grad_y).sum(axis=1, keepdims=True)) / norms


@dataclass
class ClassPrototypes:
    """Unit-norm class text embeddings, one row per class, with class names."""

    class_names: list
    embeddings: np.ndarray
    norm_tol: float = field(default=PROTOTYPE_NORM_TOL, repr=False, compare=False)

    def __post_init__(self):
        self.class_names = [str(n) for n in self.class_names]
        self.embeddings = np.asarray(self.embeddings)
        c = len(self.class_names)
        if c < 2:
            raise ParameterError("need at least two classes")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != c:
            raise ShapeError(f"{c} class names but embeddings of shape {self.embeddings.shape}")
        if len(set(self.class_names)) != c:
            raise ParameterError("class names must be unique")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1) > self.norm_tol)
        if bad.size:
            raise ParameterError(f"prototype row {bad[0]} has norm {norms[bad[0]]:.6g}, expected 1")

    @classmethod
    def from_raw(cls, class_names, embeddings):
        """Build from embeddings that still need normalizing."""
        normed, degenerate = normalize_rows(np.asarray(embeddings))
        if degenerate.any():
            raise ParameterError(f"prototype row {np.flatnonzero(degenerate)[0]} has zero norm")
        return cls(list(class_names), normed)

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def subset(self, indices):
        indices = list(indices)
        return ClassPrototypes(
            [self.class_names[i] for i in indices], self.embeddings[indices], norm_tol=self.norm_tol
        )

    @staticmethod
    def prompt(class_name):
        return f"a photo of a {class_name}"


@dataclass(frozen=True)
class Prediction:
    label: int
    confidence: float
    probabilities: np.ndarray
    max_logit: float


@dataclass
class Predictions:
    """Batched classifier output; indexing yields :class:`Prediction`.

    ``logits`` are the temperature-scaled similarities ``f . v / tau``.
    """

    labels: np.ndarray
    confidences: np.ndarray
    probabilities: np.ndarray
    logits: np.ndarray

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return Prediction(
            int(self.labels[i]),
            float(self.confidences[i]),
            self.probabilities[i],
            float(self.logits[i, self.labels[i]]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self):
        return self.probabilities.shape[1]

    @property
    def max_logits(self):
        return self.logits[np.arange(len(self)), self.labels]


def similarity_logits(features, protos, tau=DEFAULT_TAU):
    """Cosine similarities between (re-normalized) features and prototypes, divided by tau."""
    features = np.asarray(features)
    emb = protos.embeddings if isinstance(protos, ClassPrototypes) else np.asarray(protos)
    if features.ndim != 2 or features.shape[1] != emb.shape[1]:
        raise ShapeError(f"features {features.shape} vs prototypes {emb.shape}")
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    normed, _ = normalize_rows(features)
    return normed @ emb.astype(normed.dtype).T / normed.dtype.type(tau)


def predictions_from_logits(logits):
    probs = softmax(logits)
    # np.argmax returns the first maximum: ties go to the lowest class index
    labels = np.argmax(logits, axis=1)
    conf = probs[np.arange(len(labels)), labels]
    return Predictions(labels, conf, probs, logits)


def classify(features, protos, tau=DEFAULT_TAU):
    """Zero-shot predictions for every row of ``features``."""
    return predictions_from_logits(similarity_logits(features, protos, tau))
