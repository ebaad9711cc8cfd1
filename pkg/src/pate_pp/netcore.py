"""Small dense feed-forward networks with hand-written backprop.

Conventions: a batch is a ``[B, in]`` float64 matrix, each layer holds a
weight matrix ``W`` of shape ``[out, in]`` and a bias ``b`` of shape
``[out]``, and computes ``act(x @ W.T + b)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")
LEAKY_SLOPE = 0.2
LOG_CLAMP = 1e-12

_net_ids = itertools.count()


class ShapeError(ValueError):
    """Input or gradient shapes do not match the network."""


class StaleTraceError(RuntimeError):
    """A forward trace was used after its network was updated."""


class NonFiniteError(FloatingPointError):
    """An optimizer step was asked to apply NaN/Inf gradients."""


def _activate(tag, z):
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "identity":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def _activation_grad(tag, z, a):
    # derivative of the activation evaluated at pre-activation z (a = act(z))
    if tag == "relu":
        return (z > 0).astype(z.dtype)
    if tag == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {tag!r}")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]
    # bumped by every optimizer step so stale traces can be detected
    version: int = 0
    uid: int = field(default_factory=lambda: next(_net_ids))

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.b.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i}: bias shape {layer.b.shape} != ({layer.out_dim},)")
            if i and layer.in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(
                    f"layer {i} expects width {layer.in_dim}, previous layer emits "
                    f"{self.layers[i - 1].out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def n_params(self) -> int:
        return sum(layer.W.size + layer.b.size for layer in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers]
        )


def init_dense(sizes, activations, rng) -> DenseNet:
    """Build a net with He/Glorot-style scaled normal weights and zero biases.

    ``sizes`` lists every width including input and output, ``activations``
    has one tag per layer (``len(sizes) - 1`` of them).
    """
    if len(activations) != len(sizes) - 1:
        raise ShapeError(f"{len(sizes) - 1} layers but {len(activations)} activation tags")
    layers = []
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
        gain = 2.0 if act in ("relu", "leaky_relu") else 1.0
        W = rng.standard_normal((n_out, n_in)) * np.sqrt(gain / n_in)
        layers.append(Layer(W, np.zeros(n_out), act))
    return DenseNet(layers)


@dataclass
class ForwardTrace:
    net_uid: int
    net_version: int
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.post[-1]

    def features(self, layer: int = -2) -> np.ndarray:
        """Activation of an intermediate layer (default: penultimate)."""
        return self.post[layer]


@dataclass
class ParamGrads:
    W: list[np.ndarray]
    b: list[np.ndarray]
    # gradient with respect to the batch fed into the net
    inputs: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for gW, gb in zip(self.W, self.b):
            out.extend((gW, gb))
        return out

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(
            [a + b for a, b in zip(self.W, other.W)],
            [a + b for a, b in zip(self.b, other.b)],
        )

    def scaled(self, c: float) -> "ParamGrads":
        return ParamGrads([c * g for g in self.W], [c * g for g in self.b])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.arrays())


def zero_grads(net: DenseNet) -> ParamGrads:
    return ParamGrads(
        [np.zeros_like(l.W) for l in net.layers],
        [np.zeros_like(l.b) for l in net.layers],
    )


def forward(net: DenseNet, batch) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"expected a non-empty [B, {net.input_dim}] batch, got shape {x.shape}")
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"batch width {x.shape[1]} != network input dim {net.input_dim}")
    pre, post = [], []
    a = x
    for layer in net.layers:
        z = a @ layer.W.T + layer.b
        a = _activate(layer.activation, z)
        pre.append(z)
        post.append(a)
    return ForwardTrace(net.uid, net.version, x, pre, post)


def predict_logits(net: DenseNet, batch) -> np.ndarray:
    return forward(net, batch).logits


def backward(net: DenseNet, trace: ForwardTrace, grad_out, from_layer: int | None = None) -> ParamGrads:
    """Reverse-mode gradients of a scalar loss.

    ``grad_out`` is dLoss/d(output of layer ``from_layer``); by default the
    last layer, i.e. the logits. Layers after ``from_layer`` receive zero
    gradient. The returned grads also carry dLoss/d(inputs).
    """
    if trace.net_uid != net.uid or trace.net_version != net.version:
        raise StaleTraceError("trace was produced by a different or since-updated network")
    n = len(net.layers)
    top = n - 1 if from_layer is None else from_layer % n
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != trace.post[top].shape:
        raise ShapeError(f"gradient shape {g.shape} != layer output shape {trace.post[top].shape}")

    grads = zero_grads(net)
    for i in range(top, -1, -1):
        layer = net.layers[i]
        dz = g * _activation_grad(layer.activation, trace.pre[i], trace.post[i])
        a_prev = trace.post[i - 1] if i > 0 else trace.inputs
        grads.W[i] = dz.T @ a_prev
        grads.b[i] = dz.sum(axis=0)
        g = dz @ layer.W
    grads.inputs = g
    return grads


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels):
    """Per-example ``-log p[label]`` and the matching logit gradient ``p - onehot``.

    Works on a single probability vector with an int label, or on a
    ``[B, K]`` matrix with a length-B label vector.
    """
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    p2 = p[None, :] if single else p
    y = np.atleast_1d(np.asarray(labels))
    K = p2.shape[1]
    if y.shape[0] != p2.shape[0]:
        raise ShapeError(f"{p2.shape[0]} rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= K):
        raise ValueError(f"label out of range [0, {K})")
    rows = np.arange(p2.shape[0])
    loss = -np.log(np.maximum(p2[rows, y], LOG_CLAMP))
    grad = p2.copy()
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def _check_step(net: DenseNet, grads: ParamGrads):
    if len(grads.W) != len(net.layers):
        raise ShapeError("gradient layer count does not match network")
    for layer, gW, gb in zip(net.layers, grads.W, grads.b):
        if gW.shape != layer.W.shape or gb.shape != layer.b.shape:
            raise ShapeError("gradient shapes do not match network parameters")
    if not grads.is_finite():
        raise NonFiniteError("refusing to apply non-finite gradients")


def sgd_step(net: DenseNet, grads: ParamGrads, lr: float) -> DenseNet:
    _check_step(net, grads)
    for layer, gW, gb in zip(net.layers, grads.W, grads.b):
        layer.W -= lr * gW
        layer.b -= lr * gb
    net.version += 1
    return net


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet, **kw) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in net.params()],
            [np.zeros_like(p) for p in net.params()],
            **kw,
        )


def adam_step(net: DenseNet, grads: ParamGrads, state: AdamState, lr: float) -> DenseNet:
    """Bias-corrected Adam update, in place. Returns the same net."""
    _check_step(net, grads)
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(net.params(), grads.arrays(), state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    net.version += 1
    return net


class Optimizer:
    """Thin wrapper so drivers can switch between SGD and Adam by name."""

    def __init__(self, net: DenseNet, kind: str = "adam", lr: float = 0.01):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr
        self.state = AdamState.for_net(net) if kind == "adam" else None

    def step(self, net: DenseNet, grads: ParamGrads) -> DenseNet:
        if self.kind == "adam":
            return adam_step(net, grads, self.state, self.lr)
        return sgd_step(net, grads, self.lr)


def net_to_dict(net: DenseNet) -> dict:
    return {
        "sizes": net.sizes,
        "activations": [l.activation for l in net.layers],
        "weights": [l.W.ravel().tolist() for l in net.layers],
        "biases": [l.b.tolist() for l in net.layers],
    }


def net_from_dict(d: dict) -> DenseNet:
    sizes = d["sizes"]
    layers = []
    for i, act in enumerate(d["activations"]):
        W = np.asarray(d["weights"][i], dtype=np.float64).reshape(sizes[i + 1], sizes[i])
        layers.append(Layer(W, np.asarray(d["biases"][i], dtype=np.float64), act))
    return DenseNet(layers)


def fit_classifier(net: DenseNet, x, y, epochs: int, batch_size: int, rng, lr: float = 0.01, optimizer: str = "adam") -> DenseNet:
    """Plain softmax cross-entropy training, used for the teacher models."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    opt = Optimizer(net, optimizer, lr)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(y), batch_size):
            idx = order[s:s + batch_size]
            trace = forward(net, x[idx])
            _, g = cross_entropy(softmax(trace.logits), y[idx])
            opt.step(net, backward(net, trace, g / len(idx)))
    return net
