"""Context-aware module: per-sample adapter, batch-context unit and residual fusion.

For a batch ``f`` (n x d)::

    adapted = W2 relu(W1 f + b1) + b2                     (per-sample adapter)
    mean    = average of the rows of f                    (batch context)
    context = MLP(mean) + sigmoid(gate_logit) * mean      (one vector, broadcast)
    fused   = alpha * f + beta * adapted + gamma * context

``alpha``, ``beta`` and ``gamma`` are fixed; everything else is trained.
"""

import copy
import math

import numpy as np

from .classifier import normalize_rows
from .errors import EmptyBatchError, ParameterError, ShapeError, StateError
from .numeric import (
    DEFAULT_DTYPE,
    LinearLayer,
    batch_mean_backward,
    batch_mean_forward,
    relu_backward,
    relu_forward,
    sigmoid,
)

DEFAULT_FUSION = (0.1, 0.5, 1.0)
INFER_MODES = ("batch", "frozen-prototype")


def default_hidden_dim(dim):
    return max(1, math.ceil(dim / 4))


class CamParameters:
    """All trainable state of the module plus its fixed fusion coefficients.

    ``cau_layers`` maps ``d -> h -> ... -> h -> d`` with ReLU between layers.
    ``frozen_mean`` is the stored context vector used in ``frozen-prototype`` mode.
    """

    def __init__(self, adapter, cau_layers, gate_logit, alpha, beta, gamma, mode="batch", frozen_mean=None):
        if len(adapter) != 2:
            raise ParameterError("adapter must have exactly two layers")
        if not 2 <= len(cau_layers) <= 4:
            raise ParameterError(f"context MLP depth must be 2-4, got {len(cau_layers)}")
        if min(alpha, beta, gamma) < 0:
            raise ParameterError("fusion coefficients must be nonnegative")
        if mode not in INFER_MODES:
            raise ParameterError(f"unknown inference mode {mode!r}")
        d = adapter[0].in_dim
        if adapter[1].out_dim != d or cau_layers[0].in_dim != d or cau_layers[-1].out_dim != d:
            raise ShapeError("adapter and context MLP must map d -> d")
        for stack in (adapter, cau_layers):
            if any(a.out_dim != b.in_dim for a, b in zip(stack[:-1], stack[1:])):
                raise ShapeError("consecutive layer dimensions do not chain")
        self.adapter = list(adapter)
        self.cau_layers = list(cau_layers)
        dtype = adapter[0].weight.dtype
        self.gate_logit = np.array(gate_logit, dtype=dtype)
        self.grad_gate_logit = np.zeros((), dtype=dtype)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.gamma = float(gamma)
        self.mode = mode
        self.frozen_mean = None if frozen_mean is None else np.asarray(frozen_mean, dtype=dtype)
        self._cache = None

    @property
    def dim(self):
        return self.adapter[0].in_dim

    @property
    def hidden_dim(self):
        return self.adapter[0].out_dim

    @property
    def cau_depth(self):
        return len(self.cau_layers)

    @property
    def dtype(self):
        return self.adapter[0].weight.dtype

    @property
    def fusion(self):
        return (self.alpha, self.beta, self.gamma)

    def layers(self):
        return self.adapter + self.cau_layers

    def params(self):
        """Trainable arrays, in a fixed order shared with :meth:`grads`."""
        out = []
        for layer in self.layers():
            out.extend(layer.params())
        out.append(self.gate_logit)
        return out

    def grads(self):
        out = []
        for layer in self.layers():
            out.extend(layer.grads())
        out.append(self.grad_gate_logit)
        return out

    def param_names(self):
        names = []
        for i in range(2):
            names += [f"adapter.{i}.weight", f"adapter.{i}.bias"]
        for i in range(self.cau_depth):
            names += [f"cau.{i}.weight", f"cau.{i}.bias"]
        names.append("gate")
        return names

    def zero_grad(self):
        for g in self.grads():
            g[...] = 0

    def copy(self):
        out = copy.deepcopy(self)
        out._cache = None
        return out

    def astype(self, dtype):
        return CamParameters(
            [layer.astype(dtype) for layer in self.adapter],
            [layer.astype(dtype) for layer in self.cau_layers],
            self.gate_logit.astype(dtype),
            self.alpha,
            self.beta,
            self.gamma,
            self.mode,
            None if self.frozen_mean is None else self.frozen_mean.astype(dtype),
        )

    def with_fusion(self, alpha, beta, gamma):
        out = self.copy()
        out.alpha, out.beta, out.gamma = float(alpha), float(beta), float(gamma)
        return out

    def same_as(self, other):
        """Bitwise equality of all stored arrays and settings."""
        if self.fusion != other.fusion or self.mode != other.mode:
            return False
        if len(self.params()) != len(other.params()):
            return False
        if (self.frozen_mean is None) != (other.frozen_mean is None):
            return False
        pairs = list(zip(self.params(), other.params()))
        if self.frozen_mean is not None:
            pairs.append((self.frozen_mean, other.frozen_mean))
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)

    def __repr__(self):
        return (
            f"CamParameters(d={self.dim}, h={self.hidden_dim}, cau_depth={self.cau_depth}, "
            f"fusion={self.fusion}, gate_logit={float(self.gate_logit):.4g}, mode={self.mode!r})"
        )


def init_cam(dim, rng, hidden_dim=None, cau_depth=2, fusion=DEFAULT_FUSION, dtype=DEFAULT_DTYPE):
    """Fresh parameters whose output at step 0 is ``alpha * f + gamma * 0.5 * context_mean``.

    Random draws, in order: adapter layer 0 (weight then bias), then every
    context-MLP layer except the last. The final adapter layer, the final
    MLP layer and ``gate_logit`` start at zero.
    """
    h = default_hidden_dim(dim) if hidden_dim is None else int(hidden_dim)
    if not 2 <= cau_depth <= 4:
        raise ParameterError(f"context MLP depth must be 2-4, got {cau_depth}")
    adapter = [LinearLayer.init_uniform(dim, h, rng, dtype), LinearLayer.zeros(h, dim, dtype)]
    dims = [dim] + [h] * (cau_depth - 1) + [dim]
    cau = [LinearLayer.init_uniform(dims[i], dims[i + 1], rng, dtype) for i in range(cau_depth - 1)]
    cau.append(LinearLayer.zeros(dims[-2], dims[-1], dtype))
    return CamParameters(adapter, cau, 0.0, *fusion)


def _check_features(params, features):
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != params.dim:
        raise ShapeError(f"features of shape {features.shape} for a module with d={params.dim}")
    if features.shape[0] == 0:
        raise EmptyBatchError("empty feature batch")
    return features.astype(params.dtype, copy=False)


def adapter_forward(params, features):
    features = _check_features(params, features)
    first, second = params.adapter
    pre = first.forward(features)
    return second.forward(relu_forward(pre)), pre


def _context_mean(params, features, mode):
    if mode == "frozen-prototype":
        if params.frozen_mean is None:
            raise StateError("frozen-prototype mode needs a stored context mean")
        return params.frozen_mean
    return batch_mean_forward(features)


def cau_forward(params, features, mode="batch"):
    """Context vector ``MLP(context_mean) + sigmoid(gate_logit) * context_mean`` broadcast to every row."""
    features = _check_features(params, features)
    out, _ = _cau_vector(params, features, mode)
    return np.broadcast_to(out, features.shape).copy()


def _cau_vector(params, features, mode):
    context_mean = _context_mean(params, features, mode)
    z = context_mean[None, :]
    pre_acts = []
    for layer in params.cau_layers[:-1]:
        pre = layer.forward(z)
        pre_acts.append(pre)
        z = relu_forward(pre)
    mlp_out = params.cau_layers[-1].forward(z)[0]
    gate = sigmoid(float(params.gate_logit))
    out = mlp_out + params.dtype.type(gate) * context_mean
    return out, (context_mean, pre_acts, gate)


def cam_forward(params, features, mode="batch"):
    """Fused feature ``alpha*f + beta*adapted + gamma*context`` (not yet normalized).

    Populates the cache consumed by :func:`cam_backward`.
    """
    features = _check_features(params, features)
    adapted, adapter_pre = adapter_forward(params, features)
    context, (context_mean, cau_pre, gate) = _cau_vector(params, features, mode)
    t = params.dtype.type
    fused = t(params.alpha) * features + t(params.beta) * adapted + t(params.gamma) * context
    params._cache = {
        "n": features.shape[0],
        "mode": mode,
        "adapter_pre": adapter_pre,
        "context_mean": context_mean,
        "cau_pre": cau_pre,
        "gate": gate,
    }
    return fused


def cam_features(params, features, mode="batch"):
    """Fused features re-normalized to unit length, as fed to the classifier."""
    fused = cam_forward(params, features, mode)
    normed, _ = normalize_rows(fused)
    return normed, fused


def cam_backward(params, grad_out):
    """Accumulate gradients for every trainable parameter.

    Returns the gradient w.r.t. the input features (useful for checks only;
    the encoder is frozen). In ``frozen-prototype`` mode the context mean is a
    constant and passes no gradient back to the inputs.
    """
    cache = params._cache
    if cache is None:
        raise StateError("cam_backward called without a preceding cam_forward")
    params._cache = None
    grad_out = np.asarray(grad_out, dtype=params.dtype)
    n = cache["n"]
    if grad_out.shape != (n, params.dim):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, params.dim)}")
    t = params.dtype.type

    grad_in = t(params.alpha) * grad_out

    first, second = params.adapter
    g = second.backward(t(params.beta) * grad_out)
    g = relu_backward(cache["adapter_pre"], g)
    grad_in = grad_in + first.backward(g)

    grad_cau = t(params.gamma) * grad_out.sum(axis=0)
    gate = cache["gate"]
    context_mean = cache["context_mean"]
    params.grad_gate_logit += t(gate * (1.0 - gate)) * (grad_cau @ context_mean)
    grad_bar = t(gate) * grad_cau
    g = params.cau_layers[-1].backward(grad_cau[None, :])
    for layer, pre in zip(reversed(params.cau_layers[:-1]), reversed(cache["cau_pre"])):
        g = layer.backward(relu_backward(pre, g))
    grad_bar = grad_bar + g[0]
    if cache["mode"] == "batch":
        grad_in = grad_in + batch_mean_backward(grad_bar, n)
    return grad_in


def freeze_context(params, features):
    """Store the mean of ``features`` for ``frozen-prototype`` inference."""
    features = _check_features(params, features)
    params.frozen_mean = batch_mean_forward(features)
    return params
