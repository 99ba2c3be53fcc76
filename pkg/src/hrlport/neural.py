"""
Dense networks with hand-rolled reverse-mode differentiation.

Small fully-connected stacks are all the policies and the critic need,
so this module keeps the whole lifecycle explicit: Glorot-uniform
initialization from a seeded generator, a forward pass that retains
intermediates, an exact backward pass, the plain (non-adaptive) gradient
step the training loop applies, Polyak soft updates for target networks,
and a flat-binary + JSON-manifest checkpoint format.

Everything is float64; batches are rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1

_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    # name -> (value, derivative-as-function-of-the-value-and-preactivation)
    "tanh": (np.tanh, lambda a, z: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a, z: (z > 0.0).astype(np.float64)),
    "identity": (lambda z: z, lambda a, z: np.ones_like(z)),
}


class NeuralError(ValueError):
    """Raised on shape mismatches, unknown activations or non-finite math."""


@dataclass
class Layer:
    weights: np.ndarray         # (out, in)
    bias: np.ndarray            # (out,)
    activation: str

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise NeuralError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise NeuralError("layer weight/bias shapes inconsistent")


@dataclass
class GradientRecord:
    """Per-parameter gradients mirroring a network's layer shapes."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    wrt_input: np.ndarray

    def is_finite(self) -> bool:
        return (all(np.all(np.isfinite(g)) for g in self.weights)
                and all(np.all(np.isfinite(g)) for g in self.biases))


class DenseNetwork:
    """Affine-then-activation stack with retained forward intermediates."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise NeuralError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if b.weights.shape[1] != a.weights.shape[0]:
                raise NeuralError("adjacent layer dimensions do not chain")
        self.layers = list(layers)
        self._inputs: list[np.ndarray] | None = None
        self._preacts: list[np.ndarray] | None = None
        self._outputs: list[np.ndarray] | None = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the stack; keeps intermediates for a later backward.

        Accepts one sample (d,) or a batch (B, d); the output mirrors the
        input's dimensionality.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise NeuralError(
                f"input has {batch.shape[-1]} features, expected {self.input_dim}")
        inputs, preacts, outputs = [], [], []
        h = batch
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weights.T + layer.bias
            value, _ = _ACTIVATIONS[layer.activation]
            h = value(z)
            preacts.append(z)
            outputs.append(h)
        if not np.all(np.isfinite(h)):
            raise NeuralError("non-finite activation output")
        self._inputs, self._preacts, self._outputs = inputs, preacts, outputs
        return h[0] if single else h

    def backward(self, upstream: np.ndarray) -> GradientRecord:
        """Exact gradients of sum(upstream * output) w.r.t. parameters and input.

        ``upstream`` is d(loss)/d(output) with the same shape the forward
        pass returned; gradients are summed over the batch.
        """
        if self._inputs is None:
            raise NeuralError("backward called before forward")
        up = np.asarray(upstream, dtype=np.float64)
        if up.ndim == 1:
            up = up[None, :]
        if up.shape != self._outputs[-1].shape:
            raise NeuralError("upstream gradient shape does not match last output")
        weight_grads: list[np.ndarray] = [None] * len(self.layers)
        bias_grads: list[np.ndarray] = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            _, derivative = _ACTIVATIONS[layer.activation]
            dz = up * derivative(self._outputs[idx], self._preacts[idx])
            weight_grads[idx] = dz.T @ self._inputs[idx]
            bias_grads[idx] = dz.sum(axis=0)
            up = dz @ layer.weights
        return GradientRecord(weight_grads, bias_grads, wrt_input=up)

    def copy(self) -> "DenseNetwork":
        return DenseNetwork([Layer(l.weights.copy(), l.bias.copy(), l.activation)
                             for l in self.layers])

    def parameter_vector(self) -> np.ndarray:
        """All parameters flattened in layer order (weights then bias)."""
        chunks = []
        for layer in self.layers:
            chunks.append(layer.weights.ravel())
            chunks.append(layer.bias.ravel())
        return np.concatenate(chunks)


def glorot_uniform(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def build_network(input_dim: int, hidden: Sequence[int], output_dim: int,
                  rng: np.random.Generator, *, hidden_activation: str = "tanh",
                  output_activation: str = "identity",
                  output_init_bound: float | None = None) -> DenseNetwork:
    """Glorot-initialized stack: hidden layers plus one output head.

    ``output_init_bound`` switches the head to uniform(+/-bound); heads
    started near zero keep early value estimates flat instead of burying
    small reward signals under initialization noise.
    """
    dims = [input_dim, *hidden, output_dim]
    layers = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        shape = (dims[i + 1], dims[i])
        if last and output_init_bound is not None:
            weights = rng.uniform(-output_init_bound, output_init_bound,
                                  size=shape)
        else:
            weights = glorot_uniform(shape, rng)
        layers.append(Layer(
            weights=weights,
            bias=np.zeros(dims[i + 1]),
            activation=output_activation if last else hidden_activation,
        ))
    return DenseNetwork(layers)


def optimizer_step(net: DenseNetwork, grads: GradientRecord, rate: float,
                   direction: str = "descend") -> DenseNetwork:
    """Vanilla gradient step, in place: params <- params +/- rate * grad."""
    if direction not in ("ascend", "descend"):
        raise NeuralError(f"unknown direction {direction!r}")
    if len(grads.weights) != len(net.layers):
        raise NeuralError("gradient record does not match network depth")
    if not grads.is_finite():
        raise NeuralError("non-finite gradients")
    sign = 1.0 if direction == "ascend" else -1.0
    for layer, dw, db in zip(net.layers, grads.weights, grads.biases):
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise NeuralError("gradient shapes do not match layer shapes")
        layer.weights += sign * rate * dw
        layer.bias += sign * rate * db
    return net


def soft_update(target: DenseNetwork, online: DenseNetwork, tau: float) -> DenseNetwork:
    """Polyak averaging, in place: target <- tau * online + (1 - tau) * target."""
    if len(target.layers) != len(online.layers):
        raise NeuralError("networks differ in depth")
    for t, o in zip(target.layers, online.layers):
        if t.weights.shape != o.weights.shape:
            raise NeuralError("networks differ in layer shapes")
        t.weights *= 1.0 - tau
        t.weights += tau * o.weights
        t.bias *= 1.0 - tau
        t.bias += tau * o.bias
    return target


def network_manifest(net: DenseNetwork) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dtype": "<f8",
        "layers": [
            {"out": l.weights.shape[0], "in": l.weights.shape[1],
             "activation": l.activation}
            for l in net.layers
        ],
    }


def network_to_bytes(net: DenseNetwork) -> bytes:
    return net.parameter_vector().astype("<f8").tobytes()


def network_from_bytes(manifest: dict, blob: bytes) -> DenseNetwork:
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise NeuralError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    flat = np.frombuffer(blob, dtype=manifest.get("dtype", "<f8")).astype(np.float64)
    layers = []
    offset = 0
    for spec in manifest["layers"]:
        out, inp = spec["out"], spec["in"]
        w = flat[offset: offset + out * inp].reshape(out, inp).copy()
        offset += out * inp
        b = flat[offset: offset + out].copy()
        offset += out
        layers.append(Layer(w, b, spec["activation"]))
    if offset != flat.size:
        raise NeuralError("checkpoint blob size does not match manifest")
    return DenseNetwork(layers)


def save_network(net: DenseNetwork, basepath: str | Path) -> None:
    """Write ``<base>.json`` (shape manifest) and ``<base>.bin`` (parameters)."""
    base = Path(basepath)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".json").write_text(
        json.dumps(network_manifest(net), indent=2) + "\n", encoding="utf-8")
    base.with_suffix(".bin").write_bytes(network_to_bytes(net))


def load_network(basepath: str | Path) -> DenseNetwork:
    base = Path(basepath)
    manifest = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
    return network_from_bytes(manifest, base.with_suffix(".bin").read_bytes())
