"""Differentiable primitives with hand-written backward passes.

Everything operates on numpy arrays and preserves the floating dtype of its
inputs: float32 is the working width, float64 is used by the test-suite for
tight gradient checks.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatchError, LabelRangeError, ParameterError, ShapeError, StateError

DEFAULT_DTYPE = np.float32


def make_rng(seed):
    """Seeded generator used for every random draw in the library."""
    return np.random.default_rng(seed)


class LinearLayer:
    """Affine map ``y = x @ weight + bias`` with cached input for backward.

    ``weight`` has shape ``(in_dim, out_dim)``.
    """

    def __init__(self, weight, bias):
        weight = np.asarray(weight)
        bias = np.asarray(bias, dtype=weight.dtype)
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ShapeError(f"weight {weight.shape} and bias {bias.shape} do not form a layer")
        self.weight = weight
        self.bias = bias
        self.grad_weight = np.zeros_like(weight)
        self.grad_bias = np.zeros_like(bias)
        self._input = None

    @classmethod
    def init_uniform(cls, in_dim, out_dim, rng, dtype=DEFAULT_DTYPE):
        # weight first, then bias, both U(-1/sqrt(in), 1/sqrt(in))
        bound = 1.0 / math.sqrt(in_dim)
        weight = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype)
        bias = rng.uniform(-bound, bound, size=out_dim).astype(dtype)
        return cls(weight, bias)

    @classmethod
    def zeros(cls, in_dim, out_dim, dtype=DEFAULT_DTYPE):
        return cls(np.zeros((in_dim, out_dim), dtype=dtype), np.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def zero_grad(self):
        self.grad_weight[...] = 0
        self.grad_bias[...] = 0

    def astype(self, dtype):
        return LinearLayer(self.weight.astype(dtype), self.bias.astype(dtype))

    def forward(self, x):
        return linear_forward(self, x)

    def backward(self, grad_out):
        return linear_backward(self, grad_out)

    def __repr__(self):
        return f"LinearLayer({self.in_dim} -> {self.out_dim}, {self.weight.dtype})"


def linear_forward(layer, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not fit layer with in_dim={layer.in_dim}")
    layer._input = x
    return x @ layer.weight + layer.bias


def linear_backward(layer, grad_out):
    """Accumulate weight/bias gradients and return the gradient w.r.t. the input."""
    if layer._input is None:
        raise StateError("linear_backward called before linear_forward")
    x = layer._input
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (x.shape[0], layer.out_dim):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {(x.shape[0], layer.out_dim)}")
    layer.grad_weight += x.T @ grad_out
    layer.grad_bias += grad_out.sum(axis=0)
    return grad_out @ layer.weight.T


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    """``x`` is the pre-activation seen in the forward pass."""
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def batch_mean_forward(x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyBatchError("batch mean of an empty batch")
    if x.shape[0] == 1:
        # one row: return it verbatim so single-sample inference is bit-exact
        return x[0].copy()
    return x.sum(axis=0) / x.dtype.type(x.shape[0])


def batch_mean_backward(grad_mean, n):
    if n < 1:
        raise EmptyBatchError("batch mean backward with n = 0")
    grad_mean = np.asarray(grad_mean)
    row = grad_mean / grad_mean.dtype.type(n)
    return np.broadcast_to(row, (n, grad_mean.shape[0])).copy()


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def softmax(logits):
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Returns ``(loss, grad_logits)``; the gradient is ``(softmax - onehot) / n``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} logit rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise LabelRangeError(f"labels must lie in [0, {c})")
    rows = np.arange(n)
    top = logits.argmax(axis=1)
    shifted = logits - logits[rows, top][:, None]
    # the max entry contributes exactly 1; log1p of the rest keeps small losses accurate
    e = np.exp(shifted)
    e[rows, top] = 0
    log_z = np.log1p(e.sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    # p_y - 1 summed from the other classes, free of cancellation near saturation
    others = grad.copy()
    others[rows, labels] = 0
    grad[rows, labels] = -others.sum(axis=1)
    grad /= logits.dtype.type(n)
    return loss, grad


def cosine_lr(epoch, total, eta_max, eta_min=0.0):
    if total < 1:
        raise ParameterError("cosine schedule needs total >= 1")
    if not 0 <= epoch <= total:
        raise ParameterError(f"epoch {epoch} outside [0, {total}]")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * epoch / total))


@dataclass
class SgdState:
    learning_rate_max: float
    momentum: float = 0.9
    weight_decay: float = 1e-6
    total_epochs: int = 1
    epoch_index: int = 0
    learning_rate_min: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate_max > 0:
            raise ParameterError("learning_rate_max must be positive")
        if not 0 <= self.momentum < 1:
            raise ParameterError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be nonnegative")

    @property
    def learning_rate(self):
        return cosine_lr(self.epoch_index, self.total_epochs, self.learning_rate_max, self.learning_rate_min)


def sgd_step(params, grads, state):
    """One in-place SGD update with momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Gradients are zeroed afterwards. Returns ``params``.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise ShapeError("velocity buffers do not match parameter list")
    lr = state.learning_rate
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {p.shape}, grad {g.shape}, velocity {v.shape} disagree")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        p -= lr * v
        g[...] = 0
    return params
