"""Dense float64 MLPs with hand-written backprop, binary cross entropy and Adam.

Every learned component in the package (towers, the pre-trained conversion
mechanism, the abduction VAE) is an :class:`Mlp` driven by these functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError, ShapeError

PROB_EPS = 1e-7
LEAKY_SLOPE = 0.01
OUTPUT_ACTIVATIONS = ("sigmoid", "identity", "softplus")


@dataclass(eq=False)
class Mlp:
    """Weights and biases of a fully connected net.

    ``weights[l]`` has shape ``(layer_dims[l], layer_dims[l + 1])``. Hidden
    layers use leaky ReLU; the last layer applies ``output``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "sigmoid"
    negative_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ContractError(f"unknown output activation {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty lists of equal length")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {l}: weight {w.shape} incompatible with bias {b.shape}")
            if l and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {l}: input width {w.shape[0]} != {self.weights[l - 1].shape[1]}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{l}"] = w
            out[f"{prefix}b{l}"] = b
        return out

    def assign(self, params: Mapping[str, np.ndarray], prefix: str = "") -> None:
        """Swap in new arrays (as produced by :func:`adam_step`).

        Arrays are replaced, never written in place, so caches from earlier
        forward passes are detectably stale.
        """
        for l in range(len(self.weights)):
            w = params[f"{prefix}w{l}"]
            b = params[f"{prefix}b{l}"]
            if w.shape != self.weights[l].shape or b.shape != self.biases[l].shape:
                raise ShapeError(f"layer {l}: cannot assign {w.shape}/{b.shape}")
            self.weights[l] = w
            self.biases[l] = b

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.output, self.negative_slope)


def init_mlp(layer_dims, output: str = "sigmoid", rng=None) -> Mlp:
    """He-style Gaussian init, std = sqrt(2 / fan_in); zero biases."""
    rng = np.random.default_rng(rng)
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ShapeError(f"invalid layer_dims {dims}")
    weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return Mlp(weights, biases, output)


def softplus(x):
    return np.logaddexp(0.0, x)


def _apply_output(kind, logits):
    if kind == "sigmoid":
        return expit(logits)
    if kind == "softplus":
        return softplus(logits)
    return logits


@dataclass(eq=False)
class ForwardCache:
    params_id: int
    weight_refs: list
    inputs: list  # input to each layer (post-activation, post-dropout)
    preacts: list  # hidden pre-activations
    masks: list  # dropout masks per hidden layer, or None
    logits: np.ndarray
    output: np.ndarray


@dataclass(eq=False)
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def as_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{l}"] = w
            out[f"{prefix}b{l}"] = b
        return out


def mlp_forward(params: Mlp, x, dropout_rate: float = 0.0, train_mode: bool = False,
                rng_seed=None):
    """Evaluate the net on a batch of rows.

    Inverted dropout is applied to hidden activations only when
    ``train_mode`` is set; ``rng_seed`` may be an int, a SeedSequence or a
    Generator. Returns ``(output, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ShapeError(f"expected input (n, {params.layer_dims[0]}), got {x.shape}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ContractError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in MLP input")

    use_dropout = train_mode and dropout_rate > 0.0
    rng = np.random.default_rng(rng_seed) if use_dropout else None
    slope = params.negative_slope
    inputs, preacts, masks = [x], [], []
    a = x
    n_layers = len(params.weights)
    for l in range(n_layers - 1):
        h = a @ params.weights[l] + params.biases[l]
        a = np.where(h > 0, h, slope * h)
        mask = None
        if use_dropout:
            mask = (rng.random(a.shape) >= dropout_rate) / (1.0 - dropout_rate)
            a = a * mask
        preacts.append(h)
        masks.append(mask)
        inputs.append(a)
    logits = a @ params.weights[-1] + params.biases[-1]
    out = _apply_output(params.output, logits)
    cache = ForwardCache(id(params), list(params.weights), inputs, preacts, masks, logits, out)
    return out, cache


def mlp_backward(params: Mlp, cache: ForwardCache, grad_output, wrt: str = "output") -> MlpGrads:
    """Exact gradients of ``sum(grad_output * y)`` through the net.

    ``wrt="logits"`` treats ``grad_output`` as the gradient with respect to
    the pre-activation of the output layer, which is how the sigmoid heads
    receive numerically stable ``p - y`` style gradients.
    """
    if cache.params_id != id(params) or len(cache.weight_refs) != len(params.weights) or any(
        a is not b for a, b in zip(cache.weight_refs, params.weights)
    ):
        raise ContractError("forward cache does not belong to these parameters (stale or mismatched)")
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.logits.shape:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {cache.logits.shape}")
    if wrt == "output":
        if params.output == "sigmoid":
            g = g * cache.output * (1.0 - cache.output)
        elif params.output == "softplus":
            g = g * expit(cache.logits)
    elif wrt != "logits":
        raise ContractError(f"wrt must be 'output' or 'logits', got {wrt!r}")

    n_layers = len(params.weights)
    dws = [None] * n_layers
    dbs = [None] * n_layers
    slope = params.negative_slope
    for l in range(n_layers - 1, -1, -1):
        a_in = cache.inputs[l]
        dws[l] = a_in.T @ g
        dbs[l] = g.sum(axis=0)
        da = g @ params.weights[l].T
        if l == 0:
            return MlpGrads(dws, dbs, da)
        mask = cache.masks[l - 1]
        if mask is not None:
            da = da * mask
        h = cache.preacts[l - 1]
        g = da * np.where(h > 0, 1.0, slope)
    raise AssertionError("unreachable")


def bce(p, y, eps: float = PROB_EPS):
    """Elementwise binary cross entropy with p clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(y, dtype=np.float64)
    loss = -y * np.log(p) - (1.0 - y) * np.log1p(-p)
    return loss if loss.ndim else float(loss)


def bce_with_logits(logits, y, eps: float = PROB_EPS):
    """bce(sigmoid(logits), y) evaluated as softplus(z) - y z.

    The clamp becomes |z| <= logit(1 - eps). Near saturation this keeps full
    precision, where ``log1p(-p)`` of a probability close to 1 does not.
    """
    bound = np.log1p(-eps) - np.log(eps)
    z = np.clip(np.asarray(logits, dtype=np.float64), -bound, bound)
    loss = softplus(z) - np.asarray(y, dtype=np.float64) * z
    return loss if loss.ndim else float(loss)


def bce_logit_grad(p, y, eps: float = PROB_EPS):
    """d bce(sigmoid(z), y) / dz, zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    inside = (p > eps) & (p < 1.0 - eps)
    return np.where(inside, p - np.asarray(y, dtype=np.float64), 0.0)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_init(params: Mapping[str, np.ndarray], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=1e-6) -> AdamState:
    return AdamState(lr, beta1, beta2, eps, weight_decay,
                     {k: np.zeros_like(p) for k, p in params.items()},
                     {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    """One bias-corrected Adam update with decoupled weight decay.

    Returns a new parameter dict (fresh arrays) and the advanced state.
    Parameters absent from ``grads`` are treated as having zero gradient.
    """
    if set(params) != set(state.m):
        raise ContractError("parameter names do not match the optimizer state")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    new = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        state.m[k] = m
        state.v[k] = v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new[k] = p - step - state.lr * state.weight_decay * p
    return new, state
