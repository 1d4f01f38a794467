"""Masked multilayer perceptron with hand-written forward and backward passes.

Weights are stored ``(out, in)``; a batch ``X`` of shape ``(batch, in)`` maps to
``X @ (W * M).T + b``.  Hidden layers use ReLU, the last layer is linear.
"""
from __future__ import annotations

import copy
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError,
                     FrozenNetworkError, NonFiniteError, ShapeError, StaleTraceError)
from .tensor_core import Rng, check_finite

CHECKPOINT_HEADER = "SDPLAB-CKPT v1"


@dataclass
class MaskedLinear:
    weights: np.ndarray
    bias: np.ndarray
    mask: np.ndarray
    prunable: bool = True

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64).ravel()
        self.mask = np.ascontiguousarray(self.mask, dtype=np.float64)
        if self.weights.ndim != 2 or self.mask.shape != self.weights.shape:
            raise ShapeError(f"weights {self.weights.shape} and mask {self.mask.shape} must match")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not fit weights {self.weights.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.weights[self.mask == 0] = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def effective(self) -> np.ndarray:
        return self.weights * self.mask


@dataclass
class NetworkState:
    layers: list[MaskedLinear]
    role: str = "student"
    hidden_activation: str = "relu"
    frozen: bool = False
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        if self.hidden_activation != "relu":
            raise ValueError("only the relu hidden activation is supported")
        if self.role not in ("student", "teacher"):
            raise ValueError(f"unknown role {self.role!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ShapeError(f"layer widths do not conform: {a.shape} -> {b.shape}")

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].shape[1]] + [l.shape[0] for l in self.layers]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].shape[0]

    def prunable_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.prunable]

    def masks(self) -> list[np.ndarray]:
        return [l.mask.copy() for l in self.layers]

    def touch(self):
        self.version += 1


def init_network(rng: Rng, widths: list[int], role: str = "student") -> NetworkState:
    """He-initialised MLP; every layer but the classifier is prunable."""
    if len(widths) < 2:
        raise ShapeError("widths must list at least the input and output sizes")
    layers = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.child("layer", i).normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        layers.append(MaskedLinear(w, np.zeros(n_out), np.ones((n_out, n_in)),
                                   prunable=i < len(widths) - 2))
    return NetworkState(layers, role=role)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    gates: list | None
    net_id: int
    version: int

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]

    @property
    def penultimate(self) -> np.ndarray:
        """Activation feeding the classification layer."""
        return self.post[-2] if len(self.post) > 1 else self.inputs


def _effective(layer: MaskedLinear, gate) -> np.ndarray:
    w = layer.weights * layer.mask
    return w if gate is None else w * gate


def forward(net: NetworkState, inputs, gates: list | None = None) -> ForwardTrace:
    """Run a batch through the net; ``gates`` optionally scales each layer's weights elementwise."""
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != net.layers[0].shape[1]:
        raise ShapeError(f"input shape {a.shape} does not match first layer {net.layers[0].shape}")
    x = a
    pre, post = [], []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        z = a @ _effective(layer, gates[i] if gates else None).T + layer.bias
        a = np.maximum(z, 0.0) if i < last else z
        pre.append(z)
        post.append(a)
    return ForwardTrace(x, pre, post, gates, id(net), net.version)


def softmax_with_temperature(logits, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p if np.ndim(logits) == 2 else p[0]


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class LayerGrad:
    weights: np.ndarray
    bias: np.ndarray
    effective: np.ndarray  # dL/d(effective weight), needed for gate gradients


def backward(net: NetworkState, trace: ForwardTrace, output_gradient,
             hidden_gradients: dict[int, np.ndarray] | None = None) -> list[LayerGrad]:
    """Reverse-mode gradients of all layer parameters.

    ``output_gradient`` is dL/dlogits; ``hidden_gradients`` maps a layer index to an
    extra dL/dA for that layer's activation (used by representation losses).
    Gradients at masked positions are exactly zero.
    """
    if trace.net_id != id(net) or trace.version != net.version:
        raise StaleTraceError("trace was not produced by the current state of this network")
    hidden_gradients = hidden_gradients or {}
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise ShapeError(f"output gradient {g.shape} does not match logits {trace.logits.shape}")
    grads: list[LayerGrad] = [None] * len(net.layers)
    last = len(net.layers) - 1
    for i in range(last, -1, -1):
        layer = net.layers[i]
        if i in hidden_gradients:
            g = g + hidden_gradients[i]
        dz = g if i == last else g * (trace.pre[i] > 0)
        a_prev = trace.post[i - 1] if i > 0 else trace.inputs
        d_eff = dz.T @ a_prev
        gate = trace.gates[i] if trace.gates else None
        dw = d_eff * layer.mask if gate is None else d_eff * layer.mask * gate
        grads[i] = LayerGrad(dw, dz.sum(axis=0), d_eff)
        if i > 0:
            g = dz @ _effective(layer, gate)
    return grads


@dataclass
class OptimizerState:
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 1.0
    velocity: list | None = None

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0 and momentum in [0, 1)")


def global_norm(grads: list[LayerGrad]) -> float:
    return float(np.sqrt(sum(np.sum(g.weights ** 2) + np.sum(g.bias ** 2) for g in grads)))


def clip_gradients(grads: list[LayerGrad], clip_norm: float) -> tuple[list[LayerGrad], float]:
    """Scale gradients so their global L2 norm is at most ``clip_norm``; returns the scale used."""
    norm = global_norm(grads)
    scale = 1.0 if norm <= clip_norm else clip_norm / norm
    if scale == 1.0:
        return grads, 1.0
    return [LayerGrad(g.weights * scale, g.bias * scale, g.effective) for g in grads], scale


def sgd_step(net: NetworkState, opt: OptimizerState, grads: list[LayerGrad]) -> NetworkState:
    """Clip, then momentum-SGD update in place; masked weights are re-zeroed."""
    if net.frozen:
        raise FrozenNetworkError("cannot update a frozen (teacher) network")
    if len(grads) != len(net.layers):
        raise ShapeError("one gradient per layer is required")
    for g, layer in zip(grads, net.layers):
        if g.weights.shape != layer.shape or g.bias.shape != layer.bias.shape:
            raise ShapeError("gradient shapes do not match parameters")
        if not (np.all(np.isfinite(g.weights)) and np.all(np.isfinite(g.bias))):
            raise NonFiniteError("non-finite gradient")
    grads, _ = clip_gradients(grads, opt.clip_norm)
    if opt.velocity is None:
        opt.velocity = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers]
    for (vw, vb), g, layer in zip(opt.velocity, grads, net.layers):
        vw *= opt.momentum
        vw += g.weights
        vb *= opt.momentum
        vb += g.bias
        layer.weights -= opt.lr * vw
        layer.bias -= opt.lr * vb
        layer.weights[layer.mask == 0] = 0.0
        vw[layer.mask == 0] = 0.0
    net.touch()
    return net


def apply_masks(net: NetworkState, masks: dict[int, np.ndarray]) -> None:
    """AND new masks into the existing ones and zero the removed weights."""
    for i, m in masks.items():
        layer = net.layers[i]
        if m.shape != layer.shape:
            raise ShapeError(f"mask {m.shape} does not fit layer {i} {layer.shape}")
        layer.mask = layer.mask * (np.asarray(m) != 0)
        layer.weights[layer.mask == 0] = 0.0
    net.touch()


def snapshot_teacher(net: NetworkState) -> NetworkState:
    teacher = copy.deepcopy(net)
    teacher.role = "teacher"
    teacher.frozen = True
    teacher.version = 0
    return teacher


def count_remaining(net: NetworkState) -> tuple[int, int, float]:
    live = total = 0
    for layer in net.layers:
        if layer.prunable:
            live += int(layer.mask.sum())
            total += layer.mask.size
    return live, total, (live / total if total else 1.0)


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def dumps_checkpoint(net: NetworkState) -> str:
    out = io.StringIO()
    out.write(CHECKPOINT_HEADER + "\n")
    out.write(f"activation {net.hidden_activation}\n")
    out.write(f"layers {len(net.layers)}\n")
    for i, layer in enumerate(net.layers):
        n_out, n_in = layer.shape
        out.write(f"layer {i} in {n_in} out {n_out} prunable {int(layer.prunable)}\n")
        out.write("weights " + _fmt(layer.weights) + "\n")
        out.write("bias " + _fmt(layer.bias) + "\n")
        out.write("mask " + " ".join(str(int(v)) for v in layer.mask.ravel()) + "\n")
    out.write("end\n")
    return out.getvalue()


def save_checkpoint(net: NetworkState, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_checkpoint(net))
    os.replace(tmp, path)


def loads_checkpoint(text: str, role: str = "student") -> NetworkState:
    lines = text.split("\n")
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise CheckpointVersionError(f"expected header {CHECKPOINT_HEADER!r}, got {lines[0][:40]!r}")
    it = iter(lines[1:])

    def take(tag):
        try:
            line = next(it)
        except StopIteration:
            raise CheckpointTruncatedError(f"checkpoint ended while expecting {tag!r}") from None
        parts = line.split(" ")
        if not line or parts[0] != tag:
            raise CheckpointTruncatedError(f"expected a {tag!r} record, got {line[:40]!r}")
        return parts[1:]

    activation = take("activation")[0]
    n_layers = int(take("layers")[0])
    layers = []
    try:
        for i in range(n_layers):
            meta = take("layer")
            n_in, n_out, prunable = int(meta[2]), int(meta[4]), bool(int(meta[6]))
            w = np.array([float(v) for v in take("weights")])
            b = np.array([float(v) for v in take("bias")])
            m = np.array([float(v) for v in take("mask")])
            if w.size != n_in * n_out or m.size != n_in * n_out or b.size != n_out:
                raise CheckpointShapeError(f"layer {i}: value counts do not match {n_out}x{n_in}")
            layers.append(MaskedLinear(w.reshape(n_out, n_in), b, m.reshape(n_out, n_in), prunable))
        take("end")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ShapeError):
            raise CheckpointShapeError(str(exc)) from None
        raise CheckpointTruncatedError(f"malformed checkpoint record: {exc}") from None
    try:
        net = NetworkState(layers, role=role, hidden_activation=activation)
    except ShapeError as exc:
        raise CheckpointShapeError(str(exc)) from None
    if role == "teacher":
        net.frozen = True
    return net


def load_checkpoint(path, role: str = "student") -> NetworkState:
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read(), role=role)
