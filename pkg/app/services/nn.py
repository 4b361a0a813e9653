"""
Feed-forward building blocks with hand-derived backward passes.

Every layer maps a flat float64 vector to a flat float64 vector. Convolution
layers read their input as channel-major ``(channels, length)`` and emit the
same layout. A whole network travels as one parameter vector whose layout is
layer by layer, weight row-major then bias (see ``param_layout``).
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from ..errors import ConfigError, ContractError, ReportIOError, ShapeError
from .numerics import RngStream, _sigmoid_unchecked

logger = logging.getLogger(__name__)

ParamVector = np.ndarray

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")
CHECKPOINT_FORMAT = "twin-network/1"


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid_unchecked(z)
    if name == "tanh":
        return np.tanh(z)
    raise ConfigError(f"unknown activation: {name}")


def _activation_grad(name: str, z: np.ndarray, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if name == "identity":
        return dy
    if name == "relu":
        return dy * (z > 0.0)
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    if name == "tanh":
        return dy * (1.0 - y * y)
    raise ConfigError(f"unknown activation: {name}")


@dataclass
class DenseLayer:
    """y = act(W x + b) with W of shape (out, in)"""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation: {self.activation}")
        if self.bias.size != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.size} does not match {self.weight.shape[0]} outputs"
            )

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Tuple]:
        if x.shape != (self.input_dim,):
            raise ShapeError(f"dense layer expects {self.input_dim} inputs, got {x.size}")
        z = self.weight @ x + self.bias
        y = _activate(self.activation, z)
        return y, (x, z, y)

    def backward(self, cache: Tuple, dy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, z, y = cache
        dz = _activation_grad(self.activation, z, y, dy)
        d_weight = np.outer(dz, x)
        d_bias = dz
        dx = self.weight.T @ dz
        return dx, np.concatenate([d_weight.reshape(-1), d_bias])

    def params(self) -> np.ndarray:
        return np.concatenate([self.weight.reshape(-1), self.bias])

    def with_params(self, p: np.ndarray) -> "DenseLayer":
        n_w = self.weight.size
        return DenseLayer(
            weight=p[:n_w].reshape(self.weight.shape).copy(),
            bias=p[n_w:n_w + self.bias.size].copy(),
            activation=self.activation,
        )

    def describe(self) -> Dict[str, Any]:
        return {
            "type": "dense",
            "in": self.input_dim,
            "out": self.output_dim,
            "activation": self.activation,
        }


@dataclass
class Conv1dLayer:
    """
    Valid cross-correlation over a channel-major sequence

    ``kernels`` has shape (out_channels, in_channels * kernel_width); row o,
    column c*k + j multiplies input channel c at offset j. Output length is
    floor((input_length - kernel_width) / stride) + 1.
    """

    kernels: np.ndarray
    bias: np.ndarray
    in_channels: int
    input_length: int
    kernel_width: int
    stride: int = 1
    activation: str = "identity"

    def __post_init__(self):
        self.kernels = np.array(self.kernels, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.stride < 1 or self.kernel_width < 1:
            raise ConfigError("stride and kernel width must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation: {self.activation}")
        if self.kernels.shape[1] != self.in_channels * self.kernel_width:
            raise ShapeError("kernel matrix width must be in_channels * kernel_width")
        if self.bias.size != self.kernels.shape[0]:
            raise ShapeError("conv bias needs one entry per output channel")
        if self.input_length < self.kernel_width:
            raise ShapeError(
                f"input length {self.input_length} shorter than kernel width {self.kernel_width}"
            )

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def output_length(self) -> int:
        return (self.input_length - self.kernel_width) // self.stride + 1

    @property
    def input_dim(self) -> int:
        return self.in_channels * self.input_length

    @property
    def output_dim(self) -> int:
        return self.out_channels * self.output_length

    @property
    def param_count(self) -> int:
        return self.kernels.size + self.bias.size

    def _patches(self, signal: np.ndarray) -> np.ndarray:
        k, s = self.kernel_width, self.stride
        columns = [signal[:, p * s:p * s + k].reshape(-1) for p in range(self.output_length)]
        return np.stack(columns, axis=1)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Tuple]:
        if x.shape != (self.input_dim,):
            raise ShapeError(f"conv layer expects {self.input_dim} inputs, got {x.size}")
        signal = x.reshape(self.in_channels, self.input_length)
        patches = self._patches(signal)
        z = self.kernels @ patches + self.bias[:, None]
        y = _activate(self.activation, z)
        return y.reshape(-1), (patches, z, y)

    def backward(self, cache: Tuple, dy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        patches, z, y = cache
        dz = _activation_grad(self.activation, z, y, dy.reshape(z.shape))
        d_kernels = dz @ patches.T
        d_bias = dz.sum(axis=1)
        d_patches = self.kernels.T @ dz
        dx = np.zeros((self.in_channels, self.input_length))
        k, s = self.kernel_width, self.stride
        for p in range(self.output_length):
            dx[:, p * s:p * s + k] += d_patches[:, p].reshape(self.in_channels, k)
        return dx.reshape(-1), np.concatenate([d_kernels.reshape(-1), d_bias])

    def params(self) -> np.ndarray:
        return np.concatenate([self.kernels.reshape(-1), self.bias])

    def with_params(self, p: np.ndarray) -> "Conv1dLayer":
        n_k = self.kernels.size
        return Conv1dLayer(
            kernels=p[:n_k].reshape(self.kernels.shape).copy(),
            bias=p[n_k:n_k + self.bias.size].copy(),
            in_channels=self.in_channels,
            input_length=self.input_length,
            kernel_width=self.kernel_width,
            stride=self.stride,
            activation=self.activation,
        )

    def describe(self) -> Dict[str, Any]:
        return {
            "type": "conv1d",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "input_length": self.input_length,
            "kernel_width": self.kernel_width,
            "stride": self.stride,
            "activation": self.activation,
        }


Layer = Union[DenseLayer, Conv1dLayer]


@dataclass
class Network:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a network needs at least one layer")
        for i in range(1, len(self.layers)):
            prev, cur = self.layers[i - 1], self.layers[i]
            if prev.output_dim != cur.input_dim:
                raise ShapeError(
                    f"layer {i} expects {cur.input_dim} inputs but layer {i - 1} emits {prev.output_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def describe(self) -> List[Dict[str, Any]]:
        return [layer.describe() for layer in self.layers]


@dataclass
class Tape:
    """Intermediates cached by ``forward`` for one ``backward`` call"""

    network: Network
    caches: List[Tuple] = field(default_factory=list)


def forward(net: Network, x) -> Tuple[np.ndarray, Tape]:
    h = np.asarray(x, dtype=np.float64).reshape(-1)
    if h.size != net.input_dim:
        raise ShapeError(f"network expects {net.input_dim} inputs, got {h.size}")
    tape = Tape(network=net)
    for layer in net.layers:
        h, cache = layer.forward(h)
        tape.caches.append(cache)
    return h, tape


def backward(net: Network, tape: Tape, dy) -> Tuple[np.ndarray, ParamVector]:
    """
    Backpropagate ``dy`` through ``net``

    Returns:
        (dx, grads) where grads follows the ``flatten`` layout
    """
    if tape.network is not net or len(tape.caches) != len(net.layers):
        raise ContractError("tape was recorded on a different network")
    grad = np.asarray(dy, dtype=np.float64).reshape(-1)
    if grad.size != net.output_dim:
        raise ShapeError(f"dy has {grad.size} entries, network emits {net.output_dim}")
    pieces: List[np.ndarray] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grad, pieces[i] = net.layers[i].backward(tape.caches[i], grad)
    return grad, np.concatenate(pieces)


def conv1d_forward(layer: Conv1dLayer, x) -> np.ndarray:
    y, _ = layer.forward(np.asarray(x, dtype=np.float64).reshape(-1))
    return y


def flatten(net: Network) -> ParamVector:
    return np.concatenate([layer.params() for layer in net.layers])


def unflatten(template: Network, p) -> Network:
    values = np.asarray(p, dtype=np.float64).reshape(-1)
    if values.size != template.param_count:
        raise ShapeError(
            f"parameter vector has {values.size} entries, network needs {template.param_count}"
        )
    layers = []
    offset = 0
    for layer in template.layers:
        layers.append(layer.with_params(values[offset:offset + layer.param_count]))
        offset += layer.param_count
    return Network(layers)


def param_layout(net: Network) -> List[Tuple[int, str, int, Tuple[int, ...]]]:
    """(layer index, name, offset, shape) for every parameter block"""
    table = []
    offset = 0
    for i, layer in enumerate(net.layers):
        weight = layer.weight if isinstance(layer, DenseLayer) else layer.kernels
        table.append((i, "weight", offset, weight.shape))
        offset += weight.size
        table.append((i, "bias", offset, layer.bias.shape))
        offset += layer.bias.size
    return table


def sgd_step(p, g, lr) -> ParamVector:
    """p - lr * g; ``lr`` may be a scalar or a per-coordinate vector"""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"parameter/gradient length mismatch: {p.size} vs {g.size}")
    if np.isscalar(lr):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        return p - lr * g
    rates = np.asarray(lr, dtype=np.float64)
    if rates.shape != p.shape:
        raise ShapeError("per-coordinate learning rates must match the parameter vector")
    if np.any(rates < 0):
        raise ConfigError("learning rates must be non-negative")
    return p - rates * g


class Adam:
    """
    Adaptive moment steps over one flat parameter vector

    ``lr`` may be per-coordinate; a zero rate leaves that coordinate untouched.
    """

    def __init__(self, size: int, lr, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        rates = np.broadcast_to(np.asarray(lr, dtype=np.float64), (size,)).copy()
        if np.any(rates < 0):
            raise ConfigError("learning rates must be non-negative")
        self.lr = rates
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, p, g) -> ParamVector:
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != self.m.shape or g.shape != self.m.shape:
            raise ShapeError(f"Adam expects {self.m.size} entries, got {p.size} and {g.size}")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (g * g)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return p - self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


def glorot_uniform(rng: RngStream, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def dense(rng: RngStream, n_in: int, n_out: int, activation: str = "identity") -> DenseLayer:
    return DenseLayer(
        weight=glorot_uniform(rng, n_in, n_out, (n_out, n_in)),
        bias=np.zeros(n_out),
        activation=activation,
    )


def conv1d(rng: RngStream, in_channels: int, out_channels: int, input_length: int,
           kernel_width: int, stride: int = 1, activation: str = "relu") -> Conv1dLayer:
    fan_in = in_channels * kernel_width
    return Conv1dLayer(
        kernels=glorot_uniform(rng, fan_in, out_channels, (out_channels, fan_in)),
        bias=np.zeros(out_channels),
        in_channels=in_channels,
        input_length=input_length,
        kernel_width=kernel_width,
        stride=stride,
        activation=activation,
    )


def build_encoder(raw_dim: int, window: int, build, rng: RngStream) -> Network:
    """
    Encoder for one modality window (channel-major, ``raw_dim`` x ``window``)

    Strided convolutions stand in for pooling; dense blocks refine the
    features and the last layer emits ``latent_dim`` values.
    """
    layers: List[Layer] = []
    channels, length = raw_dim, window
    for i in range(build.conv_layers):
        stride = 1 if i == 0 else build.pool_stride
        if length < build.kernel_width:
            raise ConfigError(
                f"window {window} is too short for {build.conv_layers} conv layers "
                f"of width {build.kernel_width}"
            )
        layer = conv1d(rng, channels, build.conv_channels, length, build.kernel_width, stride)
        layers.append(layer)
        channels, length = layer.out_channels, layer.output_length
    width = channels * length
    for _ in range(build.dense_layers - 1):
        layers.append(dense(rng, width, build.hidden, "relu"))
        width = build.hidden
    layers.append(dense(rng, width, build.latent_dim, "identity"))
    return Network(layers)


def build_decoder(input_dim: int, output_dim: int, build, rng: RngStream) -> Network:
    """Dense blocks then a dense up-projection to the flat output window"""
    layers: List[Layer] = []
    width = input_dim
    for _ in range(build.dense_layers - 1):
        layers.append(dense(rng, width, build.hidden, "relu"))
        width = build.hidden
    layers.append(dense(rng, width, output_dim, "identity"))
    return Network(layers)


def network_to_dict(net: Network) -> Dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "layers": net.describe(),
        "params": [float(v) for v in flatten(net)],
    }


def network_from_dict(data: Dict[str, Any]) -> Network:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format: {data.get('format')}")
    template_layers: List[Layer] = []
    for spec in data["layers"]:
        if spec["type"] == "dense":
            template_layers.append(DenseLayer(
                weight=np.zeros((spec["out"], spec["in"])),
                bias=np.zeros(spec["out"]),
                activation=spec["activation"],
            ))
        elif spec["type"] == "conv1d":
            template_layers.append(Conv1dLayer(
                kernels=np.zeros((spec["out_channels"], spec["in_channels"] * spec["kernel_width"])),
                bias=np.zeros(spec["out_channels"]),
                in_channels=spec["in_channels"],
                input_length=spec["input_length"],
                kernel_width=spec["kernel_width"],
                stride=spec["stride"],
                activation=spec["activation"],
            ))
        else:
            raise ConfigError(f"unknown layer type in checkpoint: {spec['type']}")
    return unflatten(Network(template_layers), np.array(data["params"], dtype=np.float64))


def save_network(net: Network, path: str) -> str:
    """
    Write a JSON checkpoint; floats use repr so reload is bit-exact

    Raises:
        ReportIOError: when the file cannot be written
    """
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(network_to_dict(net), f)
    except OSError as e:
        raise ReportIOError(f"cannot write checkpoint: {e}", path=path) from e
    return path


def load_network(path: str) -> Network:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return network_from_dict(json.load(f))
    except OSError as e:
        raise ReportIOError(f"cannot read checkpoint: {e}", path=path) from e
