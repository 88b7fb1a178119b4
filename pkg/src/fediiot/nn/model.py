"""Layer descriptors, model specs, parameter vectors and the forward/backward engine.

Every model is a straight chain of layers. Parameters live in one flat float64
vector (a :class:`ParamSet`); each layer owns a contiguous slice of it, weights
first and then biases, both in C order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when a spec, batch or cache does not fit the model it is used with."""


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Flatten:
    pass


ACTIVATIONS = ("relu", "sigmoid", "tanh")


@dataclass(frozen=True)
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Union[Dense, Conv2d, Flatten, Activation, Softmax]


def _layer_name(i: int, layer: Layer) -> str:
    return f"layer {i} ({type(layer).__name__.lower()})"


def _out_shape(i: int, layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ShapeError(f"{_layer_name(i, layer)} expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ShapeError(f"{_layer_name(i, layer)} expects ({layer.in_ch}, H, W), got {shape}")
        if layer.kernel < 1 or layer.stride < 1:
            raise ShapeError(f"{_layer_name(i, layer)} needs kernel >= 1 and stride >= 1")
        _, h, w = shape
        if h < layer.kernel or w < layer.kernel:
            raise ShapeError(f"{_layer_name(i, layer)} kernel {layer.kernel} larger than input {h}x{w}")
        return (
            layer.out_ch,
            (h - layer.kernel) // layer.stride + 1,
            (w - layer.kernel) // layer.stride + 1,
        )
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, (Activation, Softmax)):
        if isinstance(layer, Softmax) and len(shape) != 1:
            raise ShapeError(f"{_layer_name(i, layer)} needs a flat input, got {shape}")
        return shape
    raise ShapeError(f"{_layer_name(i, layer)} is not a known layer type")


def _weight_shapes(layer: Layer) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    if isinstance(layer, Dense):
        return (layer.in_features, layer.out_features), (layer.out_features,)
    if isinstance(layer, Conv2d):
        return (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel), (layer.out_ch,)
    return None


@dataclass(frozen=True)
class _Slot:
    w_start: int
    w_shape: tuple[int, ...]
    b_start: int
    b_shape: tuple[int, ...]

    @property
    def end(self) -> int:
        return self.b_start + int(np.prod(self.b_shape))


@dataclass(frozen=True)
class ModelSpec:
    """Immutable description of a layer chain and the input it accepts.

    Shapes are validated eagerly, so an instance that exists is always usable.
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)
    slots: tuple[_Slot | None, ...] = field(init=False, repr=False, compare=False)
    param_count: int = field(init=False, compare=False)
    spec_id: str = field(init=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        shapes = [self.input_shape]
        slots: list[_Slot | None] = []
        offset = 0
        for i, layer in enumerate(self.layers):
            shapes.append(_out_shape(i, layer, shapes[-1]))
            ws = _weight_shapes(layer)
            if ws is None:
                slots.append(None)
                continue
            w_shape, b_shape = ws
            b_start = offset + int(np.prod(w_shape))
            slots.append(_Slot(offset, w_shape, b_start, b_shape))
            offset = b_start + int(np.prod(b_shape))
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "slots", tuple(slots))
        object.__setattr__(self, "param_count", offset)
        digest = hashlib.sha256(repr((self.layers, self.input_shape)).encode()).hexdigest()
        object.__setattr__(self, "spec_id", digest[:16])

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_params(self, values: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Views of layer ``i``'s weight and bias inside a flat parameter vector."""
        slot = self.slots[i]
        if slot is None:
            raise ShapeError(f"{_layer_name(i, self.layers[i])} has no parameters")
        w = values[slot.w_start:slot.b_start].reshape(slot.w_shape)
        b = values[slot.b_start:slot.end].reshape(slot.b_shape)
        return w, b


@dataclass
class ParamSet:
    """Flat float64 parameter vector tagged with the spec it instantiates."""

    values: np.ndarray
    spec_id: str

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("parameter vector must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains NaN or Inf")

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamSet":
        return ParamSet(self.values.copy(), self.spec_id)

    def checksum(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def to_bytes(self) -> bytes:
        """Spec hash (8 raw bytes) followed by the values as little-endian float64."""
        return bytes.fromhex(self.spec_id) + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        if len(blob) < 8 or (len(blob) - 8) % 8:
            raise ValueError("malformed parameter blob")
        values = np.frombuffer(blob, dtype="<f8", offset=8).astype(np.float64)
        return cls(values, blob[:8].hex())


def check_params(params: ParamSet, spec: ModelSpec) -> None:
    if params.spec_id != spec.spec_id or params.values.size != spec.param_count:
        raise ShapeError(
            f"parameters ({params.values.size}, spec {params.spec_id}) do not match "
            f"spec {spec.spec_id} with {spec.param_count} parameters"
        )


def init_model(spec: ModelSpec, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases, drawn layer by layer from ``seed``."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.param_count)
    for i, layer in enumerate(spec.layers):
        slot = spec.slots[i]
        if slot is None:
            continue
        if isinstance(layer, Dense):
            fan_in, fan_out = layer.in_features, layer.out_features
        else:
            area = layer.kernel * layer.kernel
            fan_in, fan_out = layer.in_ch * area, layer.out_ch * area
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        n = slot.b_start - slot.w_start
        values[slot.w_start:slot.b_start] = rng.uniform(-bound, bound, size=n)
    return ParamSet(values, spec.spec_id)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives sigmoid(0) == 0.5 exactly
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ForwardCache:
    spec_id: str
    params_ref: np.ndarray
    inputs: list
    output: np.ndarray


def _as_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1 and len(spec.input_shape) == 1:
        x = x.reshape(1, -1)
    if x.ndim >= 2 and x.shape[1:] == spec.input_shape:
        return x
    if x.ndim == 2 and x.shape[1] == spec.input_size:
        return x.reshape((x.shape[0],) + spec.input_shape)
    raise ShapeError(f"layer 0 ({type(spec.layers[0]).__name__.lower()}) expects input "
                     f"{spec.input_shape}, got batch of shape {x.shape}")


def _conv_cols(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, Ho, Wo, C*k*k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)


def forward(params: ParamSet, spec: ModelSpec, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    check_params(params, spec)
    x = _as_batch(spec, batch)
    vals = params.values
    inputs = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            w, b = spec.layer_params(vals, i)
            inputs.append(x)
            x = x @ w + b
        elif isinstance(layer, Conv2d):
            w, b = spec.layer_params(vals, i)
            cols = _conv_cols(x, layer.kernel, layer.stride)
            inputs.append((x.shape, cols))
            out = cols @ w.reshape(layer.out_ch, -1).T + b
            x = out.transpose(0, 3, 1, 2)
        elif isinstance(layer, Flatten):
            inputs.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Activation):
            if layer.kind == "relu":
                inputs.append(x > 0)
                x = np.where(x > 0, x, 0.0)
            elif layer.kind == "sigmoid":
                x = sigmoid(x)
                inputs.append(x)
            else:
                x = np.tanh(x)
                inputs.append(x)
        else:  # Softmax
            z = np.exp(x - x.max(axis=1, keepdims=True))
            x = z / z.sum(axis=1, keepdims=True)
            inputs.append(x)
    return x, ForwardCache(spec.spec_id, vals, inputs, x)


def backward(params: ParamSet, spec: ModelSpec, cache: ForwardCache, output_grad: np.ndarray) -> ParamSet:
    """Gradient of ``sum(output * output_grad)`` with respect to the parameters."""
    check_params(params, spec)
    grad, _ = backward_with_input(params, spec, cache, output_grad, input_grad=False)
    return grad


def backward_with_input(
    params: ParamSet, spec: ModelSpec, cache: ForwardCache, output_grad: np.ndarray,
    input_grad: bool = True,
) -> tuple[ParamSet, np.ndarray | None]:
    """Like :func:`backward` but also returns the gradient wrt the input batch."""
    if cache.spec_id != spec.spec_id or cache.params_ref is not params.values:
        raise ShapeError("forward cache is stale or belongs to a different model")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(f"output gradient shape {g.shape} != output shape {cache.output.shape}")
    vals = params.values
    grads = np.zeros(spec.param_count)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        saved = cache.inputs[i]
        if isinstance(layer, Dense):
            w, _ = spec.layer_params(vals, i)
            gw, gb = spec.layer_params(grads, i)
            gw[...] = saved.T @ g
            gb[...] = g.sum(axis=0)
            if i == 0 and not input_grad:
                return ParamSet(grads, spec.spec_id), None
            g = g @ w.T
        elif isinstance(layer, Conv2d):
            w, _ = spec.layer_params(vals, i)
            gw, gb = spec.layer_params(grads, i)
            x_shape, cols = saved
            k, s = layer.kernel, layer.stride
            n, ho, wo = cols.shape[:3]
            g_flat = g.transpose(0, 2, 3, 1).reshape(-1, layer.out_ch)
            gw[...] = (g_flat.T @ cols.reshape(-1, cols.shape[-1])).reshape(gw.shape)
            gb[...] = g_flat.sum(axis=0)
            if i == 0 and not input_grad:
                return ParamSet(grads, spec.spec_id), None
            dcols = (g_flat @ w.reshape(layer.out_ch, -1)).reshape(n, ho, wo, layer.in_ch, k, k)
            dx = np.zeros(x_shape)
            for a in range(k):
                for c in range(k):
                    dx[:, :, a:a + s * (ho - 1) + 1:s, c:c + s * (wo - 1) + 1:s] += (
                        dcols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
                    )
            g = dx
        elif isinstance(layer, Flatten):
            g = g.reshape(saved)
        elif isinstance(layer, Activation):
            if layer.kind == "relu":
                g = g * saved
            elif layer.kind == "sigmoid":
                g = g * saved * (1.0 - saved)
            else:
                g = g * (1.0 - saved * saved)
        else:
            p = saved
            g = p * (g - (g * p).sum(axis=1, keepdims=True))
    return ParamSet(grads, spec.spec_id), g


def predict_class(params: ParamSet, spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    out, _ = forward(params, spec, batch)
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(out, axis=1)


def mlp_spec(sizes: Sequence[int], hidden: str = "relu", head: str | None = None) -> ModelSpec:
    """Dense chain ``sizes[0] -> ... -> sizes[-1]`` with ``hidden`` between layers."""
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(Activation(hidden))
    if head == "softmax":
        layers.append(Softmax())
    elif head is not None:
        layers.append(Activation(head))
    return ModelSpec(tuple(layers), (sizes[0],))


def cnn_classifier_spec(side: int = 16, n_classes: int = 3, channels: int = 1) -> ModelSpec:
    """Three 3x3 conv layers (8, 16, 16 filters) then a dense logit head.

    The middle convolution uses stride 2 to keep training cheap on one CPU.
    """
    layers = (
        Conv2d(channels, 8, 3, 1), Activation("relu"),
        Conv2d(8, 16, 3, 2), Activation("relu"),
        Conv2d(16, 16, 3, 1), Activation("relu"),
        Flatten(),
    )
    probe = ModelSpec(layers, (channels, side, side))
    flat = probe.output_shape[0]
    return ModelSpec(layers + (Dense(flat, n_classes),), (channels, side, side))


def spec_to_dict(spec: ModelSpec) -> dict:
    def one(layer: Layer) -> dict:
        if isinstance(layer, Dense):
            return {"type": "dense", "in": layer.in_features, "out": layer.out_features}
        if isinstance(layer, Conv2d):
            return {"type": "conv2d", "in_ch": layer.in_ch, "out_ch": layer.out_ch,
                    "kernel": layer.kernel, "stride": layer.stride}
        if isinstance(layer, Activation):
            return {"type": "activation", "kind": layer.kind}
        return {"type": type(layer).__name__.lower()}

    return {"input_shape": list(spec.input_shape), "layers": [one(l) for l in spec.layers]}

