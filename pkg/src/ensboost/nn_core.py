"""Small dense-network engine in float64 numpy.

Sequential fully connected nets with hand-written reverse-mode gradients,
an Adam optimizer with an optional cosine learning-rate schedule, and seeded
random streams. Parameters are addressed by name (``"<layer>.weight"``,
``"<layer>.bias"``) so optimizers and checkpoints can work on flat dicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError

ACTIVATIONS = ("linear", "relu", "tanh")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# --------------------------------------------------------------------------
# random streams

def make_rng(seed, *keys):
    """Generator for the substream ``(seed, *keys)``.

    Substreams with different keys are statistically independent, and a
    given key always yields the same stream regardless of what other
    streams were created before it.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seed and substream keys must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def sample_standard_normal(rng, n):
    if n < 1:
        raise ValueError(f"need n >= 1 draws, got {n}")
    return rng.standard_normal(n)


# --------------------------------------------------------------------------
# networks

@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class DenseNet:
    """Sequential stack of :class:`Layer` objects."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].weight.shape[1] != layers[i - 1].weight.shape[0]:
                raise ShapeError(
                    f"layer {i} expects {layers[i].weight.shape[1]} inputs but "
                    f"layer {i - 1} produces {layers[i - 1].weight.shape[0]}")
        self.layers = layers

    @classmethod
    def init(cls, sizes, rng, hidden_activation="relu", output_activation="linear"):
        """Glorot-uniform weights, zero biases; ``sizes`` = [in, h1, ..., out]."""
        if len(sizes) < 2:
            raise ValueError("sizes needs at least input and output widths")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self):
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    def parameters(self):
        """Name -> array view (mutating the array mutates the net)."""
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"{i}.weight"] = layer.weight
            params[f"{i}.bias"] = layer.bias
        return params

    def copy(self):
        return DenseNet(Layer(l.weight.copy(), l.bias.copy(), l.activation)
                        for l in self.layers)

    def __repr__(self):
        acts = ",".join(l.activation for l in self.layers)
        return f"DenseNet(sizes={self.sizes}, activations=[{acts}])"


def _activate(a, kind):
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    return a


def _check_batch(net, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.input_dim:
        raise ShapeError(f"batch of shape {batch.shape} does not fit net input "
                         f"dimension {net.input_dim}")
    return batch


def forward_cache(net, batch):
    """Forward pass that also returns the activations needed by backward."""
    h = _check_batch(net, batch)
    cache = [h]
    for layer in net.layers:
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        cache.append(h)
    return h, cache


def forward(net, batch):
    return forward_cache(net, batch)[0]


def backward_from_cache(net, cache, upstream_grad):
    """Gradients of ``sum(upstream_grad * output)`` for a cached forward pass.

    Returns ``(param_grads, input_grad)``; ``param_grads`` is keyed like
    :meth:`DenseNet.parameters`.
    """
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache[-1].shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output "
                         f"{cache[-1].shape}")
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        out = cache[i + 1]
        if layer.activation == "relu":
            g = g * (out > 0.0)
        elif layer.activation == "tanh":
            g = g * (1.0 - out * out)
        grads[f"{i}.weight"] = g.T @ cache[i]
        grads[f"{i}.bias"] = g.sum(axis=0)
        g = g @ layer.weight
    return grads, g


def backward(net, batch, upstream_grad):
    _, cache = forward_cache(net, batch)
    return backward_from_cache(net, cache, upstream_grad)


# --------------------------------------------------------------------------
# optimizer

def cosine_lr(base_lr, step, total_steps):
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


class Adam:
    """Adam with bias correction; cosine decay to zero when ``total_steps`` is set."""

    def __init__(self, params, base_lr, total_steps=None):
        if base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if total_steps is not None and total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.base_lr = float(base_lr)
        self.total_steps = total_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    @property
    def schedule(self):
        return "constant" if self.total_steps is None else "cosine"

    def lr(self, step=None):
        step = self.step_count if step is None else step
        if self.total_steps is None:
            return self.base_lr
        return cosine_lr(self.base_lr, step, self.total_steps)

    def step(self, params, grads):
        """Update ``params`` in place from ``grads``; returns ``params``."""
        for name, g in grads.items():
            if name not in self.m:
                raise KeyError(f"optimizer has no state for parameter {name!r}")
            if g.shape != self.m[name].shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, "
                                 f"expected {self.m[name].shape}")
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient", parameter=name)
        lr = self.lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - ADAM_BETA1 ** t
        c2 = 1.0 - ADAM_BETA2 ** t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        return params
