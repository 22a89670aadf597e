"""Feed-forward network engine with exact reverse-mode gradients.

Networks are rectifier MLPs (ReLU between layers, linear output). Every
loss returns its value and the gradient with respect to its input, and
``backward`` chains those gradients through a cached forward pass.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Sequence, Tuple, Union

import numpy as np

from msidebias.core.errors import ContractError, DimensionError, NumericError
from msidebias.models.models import MlpParams, ModelBundle

# Set up logging
logger = logging.getLogger(__name__)

# Probabilities are clamped before the log
PROB_FLOOR = 1e-12
_ZERO_VAR = 1e-20


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations of one forward pass"""
    params_id: int
    version: int
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


def init_mlp(dims: Sequence[int], seed) -> MlpParams:
    """Symmetric uniform weights with limit sqrt(6 / fan_in), zero biases"""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise DimensionError(f"invalid layer dims {list(dims)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def init_bundle(input_dim: int, fe_hidden: Sequence[int], feature_dim: int, head_hidden: Sequence[int],
                bias_levels: Dict[str, List[str]], seed: Union[int, Sequence[int]]) -> ModelBundle:
    """Fresh bundle; every part draws from its own seed sub-stream"""
    seed = [seed] if isinstance(seed, int) else list(seed)
    fe = init_mlp([input_dim, *fe_hidden, feature_dim], [*seed, 0])
    msi = init_mlp([feature_dim, *head_hidden, 2], [*seed, 1])
    names = list(bias_levels)
    heads = [init_mlp([feature_dim, *head_hidden, len(bias_levels[name])], [*seed, 2, i])
             for i, name in enumerate(names)]
    return ModelBundle(fe, msi, heads, names, {k: list(v) for k, v in bias_levels.items()})


def _forward(params: MlpParams, X: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise DimensionError(f"input shape {X.shape} does not match first-layer input dim {params.in_dim}")
    cache = ForwardCache(id(params), params.version, [], [])
    h = X
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre_activations.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return h, cache


def forward_features(fe: MlpParams, X) -> Tuple[np.ndarray, ForwardCache]:
    """Learned features F of the input rows and the cache for backprop"""
    return _forward(fe, X)


def forward_head(head: MlpParams, F) -> Tuple[np.ndarray, ForwardCache]:
    """Logits (MSI head) or bias predictions (BE head) of the features"""
    return _forward(head, F)


def backward(params: MlpParams, cache: ForwardCache, upstream: np.ndarray
             ) -> Tuple[List[np.ndarray], np.ndarray]:
    """Exact gradients of a scalar loss w.r.t. every parameter and the input.

    ``upstream`` is dLoss/dOutput. Parameter gradients come back in
    ``params.parameters()`` order.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise ContractError("forward cache is stale: parameters changed since the forward pass")
    grad = np.asarray(upstream, dtype=np.float64)
    expected = cache.pre_activations[-1].shape
    if grad.shape != expected:
        raise DimensionError(f"upstream gradient {grad.shape} does not match output {expected}")
    n_layers = len(params.weights)
    grads: List[np.ndarray] = [None] * (2 * n_layers)
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            grad = grad * (cache.pre_activations[i] > 0.0)
        grads[2 * i] = cache.inputs[i].T @ grad
        grads[2 * i + 1] = grad.sum(axis=0)
        grad = grad @ params.weights[i].T
    return grads, grad


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def xent_loss_grad(logits, y) -> Tuple[float, np.ndarray]:
    """Batch-summed cross-entropy and its gradient softmax - onehot(y)"""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"logits must be n x M with M >= 2, got {logits.shape}")
    if y.shape != (logits.shape[0],):
        raise DimensionError(f"{y.shape[0] if y.ndim else 0} labels for {logits.shape[0]} rows")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise DimensionError(f"labels must lie in [0, {logits.shape[1]})")
    probs = softmax(logits)
    rows = np.arange(y.size)
    loss = float(-np.log(np.maximum(probs[rows, y], PROB_FLOOR)).sum())
    grad = probs.copy()
    grad[rows, y] -= 1.0
    return loss, grad


def corr_loss_grad(b_onehot, b_hat) -> Tuple[float, np.ndarray]:
    """Negative mean squared Pearson correlation over the K columns.

    loss = -(1/K) * sum_k corr^2(b_k, b_hat_k). Columns where either side
    has zero variance contribute 0 and receive zero gradient.
    """
    b = np.asarray(b_onehot, dtype=np.float64)
    bh = np.asarray(b_hat, dtype=np.float64)
    if b.shape != bh.shape or b.ndim != 2:
        raise DimensionError(f"shape mismatch: {b.shape} vs {bh.shape}")
    n, K = b.shape
    if n < 2:
        raise DimensionError("correlation loss needs at least 2 rows")
    if not np.all(np.isfinite(bh)):
        raise NumericError("non-finite bias predictions")
    x = b - b.mean(axis=0)
    yc = bh - bh.mean(axis=0)
    sxx = np.einsum("ij,ij->j", x, x)
    syy = np.einsum("ij,ij->j", yc, yc)
    sxy = np.einsum("ij,ij->j", x, yc)
    live = (sxx > _ZERO_VAR * (1.0 + np.einsum("ij,ij->j", b, b))) & \
           (syy > _ZERO_VAR * (1.0 + np.einsum("ij,ij->j", bh, bh)))
    r2 = np.zeros(K)
    grad = np.zeros_like(bh)
    if np.any(live):
        s_xx, s_yy, s_xy = sxx[live], syy[live], sxy[live]
        r2[live] = s_xy ** 2 / (s_xx * s_yy)
        # d r^2 / d b_hat_k = 2 sxy / (sxx syy) * (x_k - (sxy / syy) * yc_k)
        coef = 2.0 * s_xy / (s_xx * s_yy)
        grad[:, live] = coef * (x[:, live] - (s_xy / s_yy) * yc[:, live])
    return float(-r2.sum() / K), -grad / K


@dataclass
class Optimizer:
    """Per-parameter update state for plain, momentum or adaptive-moment steps"""
    kind: Literal["sgd", "momentum", "adam"] = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    slots: Dict[str, List[np.ndarray]] = field(default_factory=dict)


def opt_step(params: MlpParams, grads: List[np.ndarray], state: Optimizer, sign: int, lr: float) -> MlpParams:
    """Update ``params`` in place; sign +1 descends the loss, -1 ascends it"""
    if sign not in (1, -1):
        raise ContractError(f"sign must be +1 or -1, got {sign}")
    targets = params.parameters()
    if len(grads) != len(targets):
        raise DimensionError(f"{len(grads)} gradients for {len(targets)} parameter arrays")
    for p, g in zip(targets, grads):
        if p.shape != g.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.shape}")
    if state.kind == "sgd":
        steps = grads
    elif state.kind == "momentum":
        velocity = state.slots.setdefault("velocity", [np.zeros_like(p) for p in targets])
        for v, g in zip(velocity, grads):
            v *= state.momentum
            v += g
        steps = velocity
    elif state.kind == "adam":
        m = state.slots.setdefault("m", [np.zeros_like(p) for p in targets])
        v = state.slots.setdefault("v", [np.zeros_like(p) for p in targets])
        state.t += 1
        c1 = 1.0 - state.beta1 ** state.t
        c2 = 1.0 - state.beta2 ** state.t
        steps = []
        for mi, vi, g in zip(m, v, grads):
            mi *= state.beta1
            mi += (1.0 - state.beta1) * g
            vi *= state.beta2
            vi += (1.0 - state.beta2) * g * g
            steps.append((mi / c1) / (np.sqrt(vi / c2) + state.eps))
    else:
        raise ContractError(f"unknown optimizer '{state.kind}'")
    if lr != 0.0:
        for p, s in zip(targets, steps):
            p -= sign * lr * s
    params.version += 1
    return params


def predict_proba(bundle: ModelBundle, X) -> np.ndarray:
    """MSI-H probability of every input row"""
    F, _ = forward_features(bundle.fe, X)
    logits, _ = forward_head(bundle.msi_head, F)
    return softmax(logits)[:, 1]
