"""Dense feed-forward networks with hand-written reverse-mode gradients and Adam.

Parameters of a network live in one flat float64 vector; ``weights`` and
``biases`` are reshaped views into it. That keeps the optimizer and the
target-network soft update down to a handful of vectorized operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("identity", "tanh")


def _layout(layer_sizes):
    """(weight_slice, weight_shape, bias_slice) per layer, plus total size."""
    spans = []
    offset = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = slice(offset, offset + fan_out * fan_in)
        offset = w.stop
        b = slice(offset, offset + fan_out)
        offset = b.stop
        spans.append((w, (fan_out, fan_in), b))
    return spans, offset


def _views(flat, spans):
    weights = [flat[w].reshape(shape) for w, shape, _ in spans]
    biases = [flat[b] for _, _, b in spans]
    return weights, biases


@dataclass(eq=False)
class Mlp:
    """ReLU network; ``weights[k]`` is (out x in), rows act on column inputs."""

    layer_sizes: tuple
    flat: np.ndarray
    output_activation: str = "identity"
    weights: list = field(init=False, repr=False)
    biases: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        spans, size = _layout(self.layer_sizes)
        if self.flat.shape != (size,):
            raise ShapeError(f"expected {size} parameters, got {self.flat.shape}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        self._spans = spans
        self.weights, self.biases = _views(self.flat, spans)

    @property
    def n_params(self):
        return self.flat.size

    @property
    def layer_offsets(self):
        """Start offset of each layer's block in ``flat`` (weights then bias)."""
        return np.array([w.start for w, _, _ in self._spans])

    def with_params(self, flat):
        return Mlp(self.layer_sizes, flat, self.output_activation)

    def copy(self):
        return self.with_params(self.flat.copy())


@dataclass(eq=False)
class GradientBundle:
    """Gradients of ``sum(upstream * output)`` for one network evaluation."""

    flat: np.ndarray | None
    input_grads: np.ndarray
    layer_sizes: tuple = ()

    @property
    def weights(self):
        return _views(self.flat, _layout(self.layer_sizes)[0])[0]

    @property
    def biases(self):
        return _views(self.flat, _layout(self.layer_sizes)[0])[1]


def mlp_init(layer_sizes: Sequence[int], output_activation="identity", seed=0) -> Mlp:
    """Uniform fan-in initialization: every entry in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(n) < 1 for n in sizes):
        raise ValueError(f"layer_sizes must have >= 2 positive entries, got {sizes}")
    spans, size = _layout(sizes)
    rng = np.random.default_rng(seed)
    flat = np.empty(size)
    for (w, _, b), fan_in in zip(spans, sizes[:-1]):
        bound = 1.0 / np.sqrt(fan_in)
        flat[w] = rng.uniform(-bound, bound, size=w.stop - w.start)
        flat[b] = rng.uniform(-bound, bound, size=b.stop - b.start)
    return Mlp(tuple(sizes), flat, output_activation)


def _check_inputs(net, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layer_sizes[0]:
        raise ShapeError(
            f"input of shape {x.shape} does not fit a network expecting "
            f"{net.layer_sizes[0]} features"
        )
    return x


def forward_cached(net: Mlp, inputs):
    """Forward pass that also returns per-layer inputs and pre-activations."""
    x = _check_inputs(net, inputs)
    acts = [x]
    last = len(net.weights) - 1
    h = x
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T
        z += b
        if k < last:
            h = np.maximum(z, 0.0, out=z)
            acts.append(h)
        elif net.output_activation == "tanh":
            h = np.tanh(z)
        else:
            h = z
    return h, (acts, h)


def mlp_forward(net: Mlp, inputs) -> np.ndarray:
    return forward_cached(net, inputs)[0]


def backward_cached(net: Mlp, cache, upstream, param_grads=True) -> GradientBundle:
    """Reverse pass from a cache produced by :func:`forward_cached`.

    With ``param_grads=False`` only the input gradient is formed, which is all
    the actor update needs from the critic.
    """
    acts, out = cache
    delta = np.asarray(upstream, dtype=np.float64)
    if delta.shape != out.shape:
        raise ShapeError(f"upstream shape {delta.shape} != output shape {out.shape}")
    if net.output_activation == "tanh":
        delta = delta * (1.0 - out * out)
    flat = np.empty(net.n_params) if param_grads else None
    gw, gb = _views(flat, net._spans) if param_grads else (None, None)
    for k in range(len(net.weights) - 1, -1, -1):
        a = acts[k]
        if param_grads:
            np.matmul(delta.T, a, out=gw[k])
            delta.sum(axis=0, out=gb[k])
        delta = delta @ net.weights[k]
        if k > 0:
            delta *= a > 0.0
    return GradientBundle(flat, delta, net.layer_sizes)


def mlp_backward(net: Mlp, inputs, upstream) -> GradientBundle:
    """Exact gradients of ``sum(upstream * mlp_forward(net, inputs))``.

    The sum runs over the batch; callers that minimise a batch mean pass
    ``upstream`` already divided by the batch size.
    """
    _, cache = forward_cached(net, inputs)
    return backward_cached(net, cache, upstream)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n_params, learning_rate=3e-4, **kwargs):
        return cls(np.zeros(n_params), np.zeros(n_params), 0, learning_rate, **kwargs)

    def copy(self):
        return AdamState(
            self.first_moment.copy(), self.second_moment.copy(), self.step_count,
            self.learning_rate, self.beta1, self.beta2, self.epsilon,
        )


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, layer_offsets=None):
    """One bias-corrected Adam step on a flat parameter vector.

    Returns new ``(params, state)``; inputs are not modified. ``layer_offsets``
    only serves error reporting, mapping a bad gradient entry to its layer.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError(f"params {params.shape}, grads {grads.shape} and moments disagree")
    if not np.isfinite(grads).all():
        bad = int(np.flatnonzero(~np.isfinite(grads.ravel()))[0])
        layer = None
        if layer_offsets is not None:
            layer = int(np.searchsorted(layer_offsets, bad, side="right")) - 1
        raise NumericError(f"non-finite gradient at entry {bad} (layer {layer})", layer=layer)
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new, AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
