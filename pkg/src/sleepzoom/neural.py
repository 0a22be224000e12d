"""Small dense ReLU networks with hand-written backprop (float64 throughout).

Used by the PPO and DQN learners and by both halves of the phase optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_TAG = "sleepzoom-dense v1"


@dataclass
class DenseNet:
    layer_dims: tuple
    weights: list
    biases: list
    output_head: str = "linear"  # or "softmax"

    def __post_init__(self):
        if self.output_head not in ("linear", "softmax"):
            raise ValueError(f"unknown output head {self.output_head!r}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} shape mismatch")

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "DenseNet":
        return DenseNet(
            tuple(self.layer_dims), [W.copy() for W in self.weights],
            [b.copy() for b in self.biases], self.output_head,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def load_flat(self, vec: np.ndarray) -> None:
        i = 0
        for W, b in zip(self.weights, self.biases):
            W[...] = vec[i:i + W.size].reshape(W.shape)
            i += W.size
            b[...] = vec[i:i + b.size]
            i += b.size

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class ForwardTrace:
    inputs: list  # activation entering each layer
    pre: list  # affine outputs of each layer


def init(dims: Sequence[int], rng: np.random.Generator, output_head: str = "linear",
         out_scale: float = 1.0) -> DenseNet:
    """He-normal weights (variance 2 / fan_in), zero biases.

    ``out_scale`` shrinks the last layer; small values start a policy head
    close to uniform.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    Ws, bs = [], []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        W = rng.standard_normal((a, b)) * np.sqrt(2.0 / a)
        if i == len(dims) - 2:
            W *= out_scale
        Ws.append(W)
        bs.append(np.zeros(b))
    return DenseNet(dims, Ws, bs, output_head)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def forward(net: DenseNet, batch: np.ndarray):
    x = np.asarray(batch, dtype=float)
    if x.shape[-1] != net.layer_dims[0]:
        raise ValueError(f"input width {x.shape[-1]} != {net.layer_dims[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    inputs, pre = [], []
    h = x
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    if net.output_head == "softmax":
        h = softmax(h)
    return h, ForwardTrace(inputs, pre)


@dataclass
class Grads:
    weights: list
    biases: list
    inputs: Optional[np.ndarray] = None

    def scale(self, k: float) -> "Grads":
        return Grads([k * g for g in self.weights], [k * g for g in self.biases],
                     None if self.inputs is None else k * self.inputs)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in (*self.weights, *self.biases))))


def backward(net: DenseNet, trace: ForwardTrace, upstream: np.ndarray) -> Grads:
    """Reverse-mode gradients of ``sum(upstream * outputs)``.

    ``upstream`` has the shape of the network output; the returned ``Grads``
    also carry the gradient with respect to the network input.
    """
    g = np.asarray(upstream, dtype=float)
    last = len(net.weights) - 1
    if g.shape != trace.pre[last].shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {trace.pre[last].shape}")
    if net.output_head == "softmax":
        p = softmax(trace.pre[last])
        g = p * (g - np.sum(g * p, axis=-1, keepdims=True))
    gW = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for i in range(last, -1, -1):
        if i < last:
            g = g * (trace.pre[i] > 0)
        x = trace.inputs[i]
        if g.ndim == 1:
            gW[i] = np.outer(x, g)
            gb[i] = g.copy()
        else:
            gW[i] = x.T @ g
            gb[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return Grads(gW, gb, g)


@dataclass
class OptimState:
    learning_rate: float = 1e-3
    mode: str = "adam"  # or "sgd" (plain descent)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


def apply_update(net: DenseNet, grads: Grads, optim: OptimState) -> DenseNet:
    """In-place descent step; returns ``net`` for chaining."""
    params = [*net.weights, *net.biases]
    gs = [*grads.weights, *grads.biases]
    if len(params) != len(gs) or any(p.shape != g.shape for p, g in zip(params, gs)):
        raise ValueError("gradient shapes do not match network")
    if optim.clip_norm is not None:
        n = grads.norm()
        if n > optim.clip_norm:
            gs = [g * (optim.clip_norm / n) for g in gs]
    lr = optim.learning_rate
    optim.step += 1
    if optim.mode == "sgd":
        for p, g in zip(params, gs):
            p -= lr * g
        return net
    if not optim.m:
        optim.m = [np.zeros_like(p) for p in params]
        optim.v = [np.zeros_like(p) for p in params]
    b1, b2 = optim.beta1, optim.beta2
    c1 = 1 - b1 ** optim.step
    c2 = 1 - b2 ** optim.step
    for p, g, m, v in zip(params, gs, optim.m, optim.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + optim.eps)
    return net


def save_checkpoint(net: DenseNet, path) -> None:
    """Header lines (tag, dims, head) followed by one CSV row per layer part.

    Each weight matrix is written row-major as a single CSV line, then its
    bias; floats use ``repr`` so loading is lossless.
    """
    lines = [f"# {CHECKPOINT_TAG}", "dims," + ",".join(map(str, net.layer_dims)), f"head,{net.output_head}"]
    for W, b in zip(net.weights, net.biases):
        lines.append(",".join(repr(float(v)) for v in W.ravel()))
        lines.append(",".join(repr(float(v)) for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> DenseNet:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# {CHECKPOINT_TAG}":
        raise ValueError(f"{path}: not a {CHECKPOINT_TAG} checkpoint")
    dims = tuple(int(v) for v in lines[1].split(",")[1:])
    head = lines[2].split(",", 1)[1]
    Ws, bs = [], []
    body = lines[3:]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        Ws.append(np.array([float(v) for v in body[2 * i].split(",")]).reshape(a, b))
        bs.append(np.array([float(v) for v in body[2 * i + 1].split(",")]))
    return DenseNet(dims, Ws, bs, head)
