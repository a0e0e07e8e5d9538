"""Small differentiable models with exact per-example losses, gradients and
dense Hessians.

Every model is a stack of affine layers ``a_l = W_l h_{l-1} + b_l`` with an
elementwise activation between layers and a linear output. Linear and
logistic regression are the single-layer cases.

Parameters are flattened layer-major; inside a layer the weight matrix
(shape ``(fan_out, fan_in)``, row-major) precedes the bias vector.

Loss conventions: squared error is ``0.5 * ||f(x) - y||^2`` per example;
classification is the negative log-likelihood of a sigmoid (one output) or
softmax (two or more outputs) head, computed with log-sum-exp.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .data import Batch, Example, stack
from .errors import (
    DimensionError,
    HessianCapError,
    NumericalOverflowError,
    UnsupportedDecompositionError,
    ValidationError,
)

KINDS = ("linear-regression", "logistic-regression", "mlp")
ACTIVATIONS = ("tanh", "relu", "identity")
LOSSES = ("squared", "nll")
DEFAULT_HESSIAN_CAP = 2000


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    widths: tuple[int, ...]
    activation: str = "identity"
    bias: bool = True
    loss: str = ""

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if self.kind not in KINDS:
            raise ValidationError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if any(w < 1 for w in widths):
            raise ValidationError(f"layer widths must be >= 1, got {widths}")
        if self.kind == "mlp":
            if len(widths) < 3:
                raise ValidationError("mlp needs at least one hidden layer (>= 3 widths)")
            loss = self.loss or "squared"
        else:
            if len(widths) != 2:
                raise ValidationError(f"{self.kind} takes exactly 2 widths [in, out], got {widths}")
            if self.activation != "identity":
                raise ValidationError(f"{self.kind} has no hidden activation")
            loss = "squared" if self.kind == "linear-regression" else "nll"
            if self.loss and self.loss != loss:
                raise ValidationError(f"{self.kind} uses the {loss!r} loss, not {self.loss!r}")
        if loss not in LOSSES:
            raise ValidationError(f"unknown loss {loss!r}")
        object.__setattr__(self, "loss", loss)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(o, i) for i, o in zip(self.widths[:-1], self.widths[1:])]

    @property
    def d(self) -> int:
        return sum(o * i + (o if self.bias else 0) for o, i in self.layer_shapes)

    @property
    def is_quadratic(self) -> bool:
        """True when every per-example loss is exactly quadratic in the parameters."""
        return self.kind == "linear-regression"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "widths": list(self.widths), "activation": self.activation,
                "bias": self.bias, "loss": self.loss}


def init_params(spec: ModelSpec, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Gaussian weights with variance ``scale**2 / fan_in``; zero biases."""
    parts = []
    for o, i in spec.layer_shapes:
        parts.append(rng.standard_normal(o * i) * (scale / np.sqrt(i)))
        if spec.bias:
            parts.append(np.zeros(o))
    return np.concatenate(parts)


def check_params(spec: ModelSpec, params) -> np.ndarray:
    w = np.asarray(params, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != spec.d:
        raise DimensionError("parameter vector", spec.d, w.size if w.ndim == 1 else -1)
    if not np.all(np.isfinite(w)):
        raise ValidationError("parameter vector has non-finite entries")
    return w


def check_batch(spec: ModelSpec, batch: Batch) -> Batch:
    if batch.X.shape[1] != spec.input_dim:
        raise DimensionError("input features", spec.input_dim, batch.X.shape[1])
    if spec.loss == "squared":
        if batch.Y.ndim != 2:
            raise ValidationError("squared-error model needs vector targets")
        if batch.Y.shape[1] != spec.output_dim:
            raise DimensionError("target", spec.output_dim, batch.Y.shape[1])
    else:
        if batch.Y.ndim != 1:
            raise ValidationError("likelihood model needs class-index targets")
        n_classes = 2 if spec.output_dim == 1 else spec.output_dim
        if batch.Y.size and (batch.Y.min() < 0 or batch.Y.max() >= n_classes):
            raise DimensionError("class index range", n_classes, int(batch.Y.max()) + 1)
    return batch


def as_batch(spec: ModelSpec, examples: Batch | Example | Sequence[Example]) -> Batch:
    if isinstance(examples, Batch):
        return check_batch(spec, examples)
    if isinstance(examples, Example):
        examples = [examples]
    return check_batch(spec, stack(list(examples)))


# -- activations ---------------------------------------------------------------

def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_d1(name, a):
    if name == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if name == "relu":
        return (a > 0).astype(np.float64)
    return np.ones_like(a)


def _act_d2(name, a):
    if name == "tanh":
        t = np.tanh(a)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(a)


# -- core passes -----------------------------------------------------------------

def _unflatten(spec: ModelSpec, params: np.ndarray):
    layers, off = [], 0
    for o, i in spec.layer_shapes:
        W = params[off:off + o * i].reshape(o, i)
        off += o * i
        b = None
        if spec.bias:
            b = params[off:off + o]
            off += o
        layers.append((W, b))
    return layers


def _forward(spec: ModelSpec, layers, X):
    pre, hs = [], [X]
    last = len(layers) - 1
    for l, (W, b) in enumerate(layers):
        a = hs[-1] @ W.T
        if b is not None:
            a = a + b
        pre.append(a)
        if l < last:
            hs.append(_act(spec.activation, a))
    return pre, hs


def _output_terms(spec: ModelSpec, f, Y):
    """Per-example loss and its derivative with respect to the outputs."""
    if spec.loss == "squared":
        r = f - Y
        return 0.5 * np.einsum("bo,bo->b", r, r), r
    if spec.output_dim == 1:
        z = f[:, 0]
        y = Y.astype(np.float64)
        return np.logaddexp(0.0, z) - y * z, (expit(z) - y)[:, None]
    lse = logsumexp(f, axis=1)
    rows = np.arange(f.shape[0])
    p = softmax(f, axis=1)
    p[rows, Y] -= 1.0
    return lse - f[rows, Y], p


def _output_curvature(spec: ModelSpec, f):
    """d^2 loss / d f^2 per example, shape (B, out, out)."""
    B, K = f.shape
    if spec.loss == "squared":
        return np.broadcast_to(np.eye(K), (B, K, K))
    if K == 1:
        s = expit(f[:, 0])
        return (s * (1 - s))[:, None, None]
    p = softmax(f, axis=1)
    return np.einsum("bk,kl->bkl", p, np.eye(K)) - np.einsum("bk,bl->bkl", p, p)


def _apply_output_curvature(spec: ModelSpec, f, Rf):
    if spec.loss == "squared":
        return Rf
    if f.shape[1] == 1:
        s = expit(f)
        return s * (1 - s) * Rf
    p = softmax(f, axis=1)
    return p * Rf - p * np.sum(p * Rf, axis=1, keepdims=True)


def _flatten_grads(spec, grads, per_example):
    parts = []
    for gW, gb in grads:
        parts.append(gW)
        if spec.bias:
            parts.append(gb)
    return np.concatenate(parts, axis=1 if per_example else 0)


def _backward(spec, layers, pre, hs, delta, per_example):
    grads = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        h = hs[l]
        if per_example:
            gW = np.einsum("bo,bi->boi", delta, h).reshape(delta.shape[0], -1)
            gb = delta
        else:
            gW = (delta.T @ h).ravel()
            gb = delta.sum(axis=0)
        grads[l] = (gW, gb)
        if l > 0:
            delta = (delta @ W) * _act_d1(spec.activation, pre[l - 1])
    return _flatten_grads(spec, grads, per_example)


def _check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise NumericalOverflowError(f"non-finite {what}")
    return values


# -- fast unchecked entry points (used by the sampler's inner loop) ------------------

def losses_unchecked(spec: ModelSpec, params: np.ndarray, X, Y) -> np.ndarray:
    pre, _ = _forward(spec, _unflatten(spec, params), X)
    return _output_terms(spec, pre[-1], Y)[0]


def grad_sum_unchecked(spec: ModelSpec, params: np.ndarray, X, Y) -> np.ndarray:
    layers = _unflatten(spec, params)
    pre, hs = _forward(spec, layers, X)
    _, delta = _output_terms(spec, pre[-1], Y)
    return _backward(spec, layers, pre, hs, delta, per_example=False)


def component_losses_unchecked(spec: ModelSpec, params: np.ndarray, X, Y, S: int) -> np.ndarray:
    pre, _ = _forward(spec, _unflatten(spec, params), X)
    r = pre[-1] - Y
    return 0.5 * (r * r).reshape(r.shape[0], S, -1).sum(axis=2)


# -- batch API ------------------------------------------------------------------

def batch_losses(spec: ModelSpec, params, examples) -> np.ndarray:
    w = check_params(spec, params)
    b = as_batch(spec, examples)
    with np.errstate(over="ignore", invalid="ignore"):
        return _check_finite(losses_unchecked(spec, w, b.X, b.Y), "loss")


def batch_grads(spec: ModelSpec, params, examples) -> np.ndarray:
    """Per-example gradients, shape (B, d)."""
    w = check_params(spec, params)
    b = as_batch(spec, examples)
    layers = _unflatten(spec, w)
    with np.errstate(over="ignore", invalid="ignore"):
        pre, hs = _forward(spec, layers, b.X)
        _, delta = _output_terms(spec, pre[-1], b.Y)
        return _check_finite(_backward(spec, layers, pre, hs, delta, per_example=True), "gradient")


def batch_grad_sum(spec: ModelSpec, params, examples) -> np.ndarray:
    w = check_params(spec, params)
    b = as_batch(spec, examples)
    with np.errstate(over="ignore", invalid="ignore"):
        return _check_finite(grad_sum_unchecked(spec, w, b.X, b.Y), "gradient")


def _component_count(spec: ModelSpec, b: Batch) -> int:
    if not b.has_components:
        raise UnsupportedDecompositionError("example does not declare loss components")
    S = int(b.components[0])
    if np.any(b.components != S):
        raise UnsupportedDecompositionError("mixed component counts within one batch")
    if spec.loss != "squared":
        raise UnsupportedDecompositionError("per-component losses need a squared-error model")
    if spec.output_dim % S:
        raise UnsupportedDecompositionError(
            f"{S} components do not evenly split {spec.output_dim} outputs")
    return S


def batch_component_losses(spec: ModelSpec, params, examples) -> np.ndarray:
    """Per-component losses, shape (B, S). Component s covers the s-th
    contiguous block of ``out / S`` outputs."""
    w = check_params(spec, params)
    b = as_batch(spec, examples)
    S = _component_count(spec, b)
    with np.errstate(over="ignore", invalid="ignore"):
        return _check_finite(component_losses_unchecked(spec, w, b.X, b.Y, S), "loss")


def hvp(spec: ModelSpec, params, examples, v) -> np.ndarray:
    """Hessian-vector product of the summed loss, by a forward-over-reverse
    (R-operator) pass through the network."""
    w = check_params(spec, params)
    b = as_batch(spec, examples)
    v = np.asarray(v, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        return _check_finite(_hvp(spec, w, b.X, b.Y, v), "Hessian-vector product")


def _hvp(spec, params, X, Y, v):
    layers = _unflatten(spec, params)
    dirs = _unflatten(spec, v)
    pre, hs = _forward(spec, layers, X)
    act = spec.activation

    r_pre, r_hs = [], [np.zeros_like(X)]
    last = len(layers) - 1
    for l, ((W, _), (VW, Vb)) in enumerate(zip(layers, dirs)):
        ra = r_hs[-1] @ W.T + hs[l] @ VW.T
        if Vb is not None:
            ra = ra + Vb
        r_pre.append(ra)
        if l < last:
            r_hs.append(_act_d1(act, pre[l]) * ra)

    f = pre[-1]
    _, delta = _output_terms(spec, f, Y)
    r_delta = _apply_output_curvature(spec, f, r_pre[-1])
    grads = [None] * len(layers)
    for l in range(last, -1, -1):
        W, _ = layers[l]
        VW, _ = dirs[l]
        grads[l] = ((r_delta.T @ hs[l] + delta.T @ r_hs[l]).ravel(), r_delta.sum(axis=0))
        if l > 0:
            a, ra = pre[l - 1], r_pre[l - 1]
            back = delta @ W
            r_back = r_delta @ W + delta @ VW
            r_delta = _act_d2(act, a) * ra * back + _act_d1(act, a) * r_back
            delta = back * _act_d1(act, a)
    return _flatten_grads(spec, grads, per_example=False)


def _single_layer_jacobian(spec: ModelSpec, X):
    """d f / d params for a single affine layer, shape (B, out, d)."""
    B, n_in = X.shape
    K = spec.output_dim
    J = np.zeros((B, K, spec.d))
    for o in range(K):
        J[:, o, o * n_in:(o + 1) * n_in] = X
        if spec.bias:
            J[:, o, K * n_in + o] = 1.0
    return J


def per_example_hessians(spec: ModelSpec, params, examples, cap: int = DEFAULT_HESSIAN_CAP) -> np.ndarray:
    """Per-example Hessians, shape (B, d, d), each exactly symmetric."""
    w = check_params(spec, params)
    b = as_batch(spec, examples)
    if spec.d > cap:
        raise HessianCapError(spec.d, cap)
    with np.errstate(over="ignore", invalid="ignore"):
        if len(spec.layer_shapes) == 1:
            f = _forward(spec, _unflatten(spec, w), b.X)[0][-1]
            J = _single_layer_jacobian(spec, b.X)
            H = np.einsum("boi,bop,bpj->bij", J, _output_curvature(spec, f), J)
        else:
            eye = np.eye(spec.d)
            H = np.empty((len(b), spec.d, spec.d))
            for k in range(len(b)):
                Xk, Yk = b.X[k:k + 1], b.Y[k:k + 1]
                H[k] = np.stack([_hvp(spec, w, Xk, Yk, e) for e in eye], axis=1)
        H = 0.5 * (H + np.swapaxes(H, 1, 2))
        return _check_finite(H, "Hessian")


def hessian(spec: ModelSpec, params, examples, cap: int = DEFAULT_HESSIAN_CAP) -> np.ndarray:
    """Dense Hessian of the summed loss over ``examples``, symmetrized."""
    w = check_params(spec, params)
    b = as_batch(spec, examples)
    if spec.d > cap:
        raise HessianCapError(spec.d, cap)
    with np.errstate(over="ignore", invalid="ignore"):
        if len(spec.layer_shapes) == 1:
            f = _forward(spec, _unflatten(spec, w), b.X)[0][-1]
            J = _single_layer_jacobian(spec, b.X)
            H = np.einsum("boi,bop,bpj->ij", J, _output_curvature(spec, f), J)
        else:
            H = np.stack([_hvp(spec, w, b.X, b.Y, e) for e in np.eye(spec.d)], axis=1)
        H = 0.5 * (H + H.T)
        return _check_finite(H, "Hessian")


# -- single-example API ------------------------------------------------------------

def loss(spec: ModelSpec, params, ex: Example) -> float:
    return float(batch_losses(spec, params, ex)[0])


def grad(spec: ModelSpec, params, ex: Example) -> np.ndarray:
    return batch_grad_sum(spec, params, ex)


def component_losses(spec: ModelSpec, params, ex: Example) -> np.ndarray:
    return batch_component_losses(spec, params, ex)[0]
