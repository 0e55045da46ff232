"""Two-stage adaptation: pseudo-label filtering, then training the context-aware module."""

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .cam import DEFAULT_FUSION, INFER_MODES, cam_backward, cam_features, freeze_context, init_cam
from .cbpl import CbplConfig, cbpl_filter, class_histogram
from .classifier import (
    DEFAULT_TAU,
    classify,
    normalize_rows_backward,
    predictions_from_logits,
)
from .errors import AdaptationImpossibleError, DivergenceError, ParameterError, ShapeError
from .metrics import BaseNewResult, base_to_new_split, evaluate, harmonic_mean
from .numeric import DEFAULT_DTYPE, SgdState, make_rng, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)

# no published value; chosen on the synthetic benchmark
SUGGESTED_ETA_MAX = 2e-4


@dataclass
class TrainConfig:
    eta_max: float
    epochs: int = 15
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-6
    tau: float = DEFAULT_TAU
    cbpl: CbplConfig = field(default_factory=CbplConfig)
    fusion: tuple = DEFAULT_FUSION
    cau_depth: int = 2
    hidden_dim: int = None
    seed: int = 0
    shuffle: bool = True
    infer_mode: str = "batch"

    def __post_init__(self):
        if isinstance(self.cbpl, dict):
            self.cbpl = CbplConfig(**self.cbpl)
        self.fusion = tuple(float(x) for x in self.fusion)
        if not self.eta_max > 0:
            raise ParameterError("eta_max must be positive")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not self.tau > 0:
            raise ParameterError("tau must be positive")
        if len(self.fusion) != 3 or min(self.fusion) < 0:
            raise ParameterError("fusion must be three nonnegative coefficients")
        if not 2 <= self.cau_depth <= 4:
            raise ParameterError("cau_depth must be 2-4")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ParameterError("hidden_dim must be >= 1")
        if self.infer_mode not in INFER_MODES:
            raise ParameterError(f"infer_mode must be one of {INFER_MODES}")

    def to_dict(self):
        d = asdict(self)
        d["fusion"] = list(self.fusion)
        return d


@dataclass
class EpochStats:
    epoch: int
    learning_rate: float
    mean_loss: float
    # model accuracy on the filtered set against ground truth, when supplied
    train_accuracy: float = None
    seconds: float = 0.0


@dataclass
class TrainingTrace:
    epochs: list = field(default_factory=list)
    initial_loss: float = None

    def __len__(self):
        return len(self.epochs)

    @property
    def learning_rates(self):
        return [e.learning_rate for e in self.epochs]

    @property
    def losses(self):
        return [e.mean_loss for e in self.epochs]

    def to_dict(self, timings=False):
        rows = []
        for e in self.epochs:
            row = {
                "epoch": e.epoch,
                "learning_rate": e.learning_rate,
                "mean_loss": e.mean_loss,
                "train_accuracy": e.train_accuracy,
            }
            if timings:
                row["seconds"] = e.seconds
            rows.append(row)
        return {"initial_loss": self.initial_loss, "epochs": rows}


def pseudo_label_loss(params, features, labels, protos, tau, mode="batch"):
    """Cross-entropy of the module's predictions against pseudo-labels.

    Runs forward and backward; gradients accumulate into ``params``.
    Returns ``(loss, logits)``.
    """
    emb = protos.embeddings.astype(params.dtype)
    normed, fused = cam_features(params, features, mode)
    inv_tau = params.dtype.type(1.0 / tau)
    logits = (normed @ emb.T) * inv_tau
    loss, grad_logits = softmax_cross_entropy(logits, labels)
    grad_normed = (grad_logits * inv_tau) @ emb
    cam_backward(params, normalize_rows_backward(fused, normed, grad_normed))
    return loss, logits


def prepare_data(features, protos, cfg, preds=None):
    """Zero-shot predictions followed by class-balanced filtering."""
    if np.asarray(features).shape[1:] != (protos.dim,):
        raise ShapeError(f"features {np.asarray(features).shape} vs prototype dim {protos.dim}")
    if preds is None:
        preds = classify(features, protos, cfg.tau)
    ds = cbpl_filter(preds, cfg.cbpl, protos.num_classes)
    hist = class_histogram(ds, protos.num_classes)
    log.info("filtered %d of %d samples; per-class counts %s", len(ds), len(preds), hist.tolist())
    log.debug("class thresholds %s", ds.thresholds)
    if len(ds) == 0:
        raise AdaptationImpossibleError(
            f"no samples survive filtering (n={len(preds)}, global threshold {cfg.cbpl.global_threshold}, "
            f"retention ratio {cfg.cbpl.retention_ratio})"
        )
    missing = [protos.class_names[k] for k in ds.empty_classes]
    if missing:
        warnings.warn(f"no samples predicted for classes: {', '.join(missing)}", stacklevel=2)
    return ds


def adapt(features, protos, cfg, truth=None, dtype=DEFAULT_DTYPE, dataset=None):
    """Train a fresh module on the pseudo-labelled target set.

    Returns ``(params, trace, dataset)``. The RNG seeded with ``cfg.seed``
    initializes the module, then draws one permutation per epoch.
    ``features`` and ``protos`` are never modified.
    """
    features = np.asarray(features)
    if dataset is None:
        dataset = prepare_data(features, protos, cfg)
    rng = make_rng(cfg.seed)
    params = init_cam(
        protos.dim, rng, hidden_dim=cfg.hidden_dim, cau_depth=cfg.cau_depth, fusion=cfg.fusion, dtype=dtype
    )
    x = features[dataset.indices].astype(dtype)
    y = np.asarray(dataset.labels, dtype=np.int64)
    gt = None if truth is None else np.asarray(truth, dtype=np.int64)[dataset.indices]
    m = len(y)
    state = SgdState(cfg.eta_max, cfg.momentum, cfg.weight_decay, total_epochs=max(cfg.epochs, 1))
    trace = TrainingTrace()

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        state.epoch_index = epoch
        lr = state.learning_rate
        snapshot = params.copy()
        order = rng.permutation(m) if cfg.shuffle else np.arange(m)
        total_loss = 0.0
        correct = 0
        for lo in range(0, m, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            loss, logits = pseudo_label_loss(params, x[batch], y[batch], protos, cfg.tau)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch + 1}", params=snapshot, epoch=epoch)
            if trace.initial_loss is None:
                trace.initial_loss = loss
            total_loss += loss * len(batch)
            if gt is not None:
                correct += int((np.argmax(logits, axis=1) == gt[batch]).sum())
            sgd_step(params.params(), params.grads(), state)
        mean_loss = total_loss / m
        trace.epochs.append(
            EpochStats(
                epoch + 1,
                lr,
                mean_loss,
                None if gt is None else correct / m,
                time.perf_counter() - start,
            )
        )
        log.info("epoch %d/%d lr=%.3g loss=%.4f", epoch + 1, cfg.epochs, lr, mean_loss)

    freeze_context(params, x)
    params.mode = cfg.infer_mode
    return params, trace, dataset


def infer(params, features, protos, tau=DEFAULT_TAU, mode=None, batch_size=None):
    """Predictions through the trained module.

    In ``batch`` mode the context mean is taken over each chunk of
    ``batch_size`` rows (the whole input when ``None``), so results depend
    on how the input is batched. ``frozen-prototype`` mode uses the stored
    mean and is batch-independent.
    """
    mode = params.mode if mode is None else mode
    features = np.asarray(features)
    n = features.shape[0]
    step = n if batch_size is None else int(batch_size)
    chunks = []
    for lo in range(0, n, max(step, 1)):
        normed, _ = cam_features(params, features[lo:lo + step], mode)
        params._cache = None
        chunks.append(classify(normed, protos, tau).logits)
    return predictions_from_logits(np.concatenate(chunks, axis=0))


def zero_init_loss(features, labels, protos, alpha, gamma, tau):
    """Loss of the untrained module in closed form: ``alpha * f + 0.5 * gamma * context_mean``."""
    f = np.asarray(features, dtype=np.float64)
    fused = alpha * f + 0.5 * gamma * f.mean(axis=0)
    logits = classify(fused, protos.embeddings.astype(np.float64), tau).logits
    return softmax_cross_entropy(logits, labels)[0]


def adapt_base_to_new(features, truth, protos, cfg, scheme, zero_shot=None, dtype=DEFAULT_DTYPE):
    """Adapt on base-class samples only, then score base and new classes separately.

    Classification at test time is restricted to each split's own prototypes.
    Returns ``(BaseNewResult, params)``.
    """
    truth = np.asarray(truth, dtype=np.int64)
    if zero_shot is None and scheme.endswith("accuracy-ranked"):
        zero_shot = evaluate(classify(features, protos, cfg.tau), truth, protos.num_classes)
    base, new = base_to_new_split(protos.class_names, scheme, zero_shot)
    base_rows = np.flatnonzero(np.isin(truth, base))
    new_rows = np.flatnonzero(np.isin(truth, new))
    base_protos = protos.subset(base)
    params, _, _ = adapt(features[base_rows], base_protos, cfg, dtype=dtype)

    def split_accuracy(rows, classes):
        remap = {k: i for i, k in enumerate(classes)}
        local_truth = np.array([remap[k] for k in truth[rows]], dtype=np.int64)
        preds = infer(params, features[rows], protos.subset(classes), cfg.tau)
        return evaluate(preds, local_truth, len(classes)).average

    a = split_accuracy(base_rows, base)
    b = split_accuracy(new_rows, new)
    return BaseNewResult(a, b, harmonic_mean(a, b)), params

