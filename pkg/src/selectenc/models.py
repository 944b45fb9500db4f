"""Small image classifiers, their flat parameter vectors and the cross-entropy loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    k: int
    padding: int = 0


@dataclass(frozen=True)
class Pool:
    kind: str = "max"  # "max" or "avg", always 2x2 / stride 2


@dataclass(frozen=True)
class Activation:
    kind: str = "tanh"  # "tanh", "sigmoid" or "relu"


Layer = Union[Dense, Conv, Pool, Activation]

_ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "relu": ad.relu}


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus input geometry.

    ``input_shape`` is (height, width, channels); dense-only models may use any
    shape, the input is flattened before the first dense layer.
    """

    layers: tuple
    input_shape: tuple
    num_classes: int
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if self.num_classes < 2:
            raise ModelSpecError(f"num_classes must be >= 2, got {self.num_classes}")
        shapes = self._trace_shapes()
        if shapes[-1] != (self.num_classes,):
            raise ModelSpecError(
                f"model output shape {shapes[-1]} does not match num_classes={self.num_classes}"
            )

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def _trace_shapes(self) -> list[tuple]:
        h, w, c = (self.input_shape + (1, 1, 1))[:3] if len(self.input_shape) < 3 else self.input_shape
        shape: tuple = (c, h, w) if len(self.input_shape) == 3 else (self.input_size,)
        shapes = [shape]
        prev = "input"
        for i, layer in enumerate(self.layers):
            here = f"layer {i} ({type(layer).__name__})"
            if isinstance(layer, Dense):
                n = int(np.prod(shape))
                if n != layer.in_features:
                    raise ModelSpecError(
                        f"{here} expects {layer.in_features} inputs but {prev} yields {n}"
                    )
                shape = (layer.out_features,)
            elif isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise ModelSpecError(f"{here} expects {layer.in_ch} channels but {prev} yields {shape}")
                ho = shape[1] + 2 * layer.padding - layer.k + 1
                wo = shape[2] + 2 * layer.padding - layer.k + 1
                if ho < 1 or wo < 1:
                    raise ModelSpecError(f"{here} kernel {layer.k} too large for {prev} output {shape}")
                shape = (layer.out_ch, ho, wo)
            elif isinstance(layer, Pool):
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise ModelSpecError(f"{here} cannot pool {prev} output {shape}")
                if layer.kind not in ("max", "avg"):
                    raise ModelSpecError(f"{here} unknown pool kind {layer.kind!r}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Activation):
                if layer.kind not in _ACTIVATIONS:
                    raise ModelSpecError(f"{here} unknown activation {layer.kind!r}")
            else:
                raise ModelSpecError(f"{here} is not a layer descriptor")
            shapes.append(shape)
            prev = here
        return shapes


def dense_spec(sizes: Sequence[int], activation: str = "tanh", input_shape=None) -> ModelSpec:
    """Fully connected net ``sizes[0] -> ... -> sizes[-1]`` with activations between layers."""
    layers: list = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i:
            layers.append(Activation(activation))
        layers.append(Dense(a, b))
    return ModelSpec(layers, input_shape or (sizes[0],), sizes[-1], name="dense")


def lenet_small(
    input_shape=(32, 32, 3),
    num_classes: int = 10,
    channels=(6, 12),
    hidden: int = 64,
    activation: str = "tanh",
    pool: str = "avg",
) -> ModelSpec:
    """conv5-pool-conv5-pool-dense-dense with same-padded convolutions."""
    h, w, c = input_shape
    c1, c2 = channels
    flat = c2 * (h // 4) * (w // 4)
    layers = [
        Conv(c, c1, 5, padding=2), Activation(activation), Pool(pool),
        Conv(c1, c2, 5, padding=2), Activation(activation), Pool(pool),
        Dense(flat, hidden), Activation(activation),
        Dense(hidden, num_classes),
    ]
    return ModelSpec(layers, input_shape, num_classes, name="lenet-small")


def cnn_small(
    input_shape=(32, 32, 3),
    num_classes: int = 10,
    channels=(8, 16),
    hidden: int = 64,
    activation: str = "relu",
) -> ModelSpec:
    """Two 5x5 'valid' convolutions each followed by max pooling, then two dense layers."""
    h, w, c = input_shape
    c1, c2 = channels
    h2, w2 = ((h - 4) // 2 - 4) // 2, ((w - 4) // 2 - 4) // 2
    layers = [
        Conv(c, c1, 5), Activation(activation), Pool("max"),
        Conv(c1, c2, 5), Activation(activation), Pool("max"),
        Dense(c2 * h2 * w2, hidden), Activation(activation),
        Dense(hidden, num_classes),
    ]
    return ModelSpec(layers, input_shape, num_classes, name="cnn-small")


BUILTIN_SPECS = {"lenet-small": lenet_small, "cnn-small": cnn_small}


def get_spec(name: str, **kwargs) -> ModelSpec:
    if name == "linear":
        shape = kwargs.get("input_shape", (8, 8, 1))
        return ModelSpec([Dense(int(np.prod(shape)), kwargs.get("num_classes", 2))], shape,
                         kwargs.get("num_classes", 2), name="linear")
    try:
        return BUILTIN_SPECS[name](**kwargs)
    except KeyError:
        raise ModelSpecError(f"unknown model {name!r}; choose from linear, {', '.join(BUILTIN_SPECS)}") from None


@dataclass(frozen=True)
class Block:
    """One contiguous slice of the flat parameter vector."""

    layer: int
    role: str  # "weight" or "bias"
    start: int
    stop: int
    shape: tuple

    @property
    def size(self) -> int:
        return self.stop - self.start


def _blocks_for(spec: ModelSpec) -> list[Block]:
    blocks, pos = [], 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            shapes = [("weight", (layer.out_features, layer.in_features)), ("bias", (layer.out_features,))]
        elif isinstance(layer, Conv):
            shapes = [("weight", (layer.out_ch, layer.in_ch, layer.k, layer.k)), ("bias", (layer.out_ch,))]
        else:
            continue
        for role, shape in shapes:
            n = int(np.prod(shape))
            blocks.append(Block(i, role, pos, pos + n, shape))
            pos += n
    return blocks


@dataclass(frozen=True, eq=False)
class ParamVector:
    """All parameters of a model as one float64 vector plus the block layout."""

    spec: ModelSpec
    theta: np.ndarray
    layer_index: tuple = field(default=())

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if not self.layer_index:
            object.__setattr__(self, "layer_index", tuple(_blocks_for(self.spec)))
        if self.layer_index[-1].stop != theta.size:
            raise ModelSpecError(f"theta has {theta.size} entries, layout needs {self.layer_index[-1].stop}")

    @property
    def m(self) -> int:
        return self.theta.size

    @property
    def layer_ids(self) -> list[int]:
        return sorted({b.layer for b in self.layer_index})

    def blocks(self) -> list[np.ndarray]:
        return [self.theta[b.start : b.stop].reshape(b.shape) for b in self.layer_index]

    def with_theta(self, theta) -> "ParamVector":
        return ParamVector(self.spec, theta, self.layer_index)

    def scaled(self, c: float) -> "ParamVector":
        return self.with_theta(self.theta * c)


@dataclass(frozen=True, eq=False)
class FlatGradient:
    """Gradient of the loss w.r.t. every parameter, in layer_index order.

    ``tensor`` is set (and tape-attached) only when the gradient was built with
    ``create_graph=True``.
    """

    values: np.ndarray
    layer_index: tuple
    tensor: Tensor | None = None

    def __len__(self):
        return self.values.size


def build(spec: ModelSpec, seed: int) -> ParamVector:
    """Initialize every weight and bias from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    blocks = _blocks_for(spec)
    theta = np.empty(blocks[-1].stop)
    for b in blocks:
        layer = spec.layers[b.layer]
        fan_in = layer.in_features if isinstance(layer, Dense) else layer.in_ch * layer.k * layer.k
        bound = 1.0 / np.sqrt(fan_in)
        theta[b.start : b.stop] = rng.uniform(-bound, bound, size=b.size)
    return ParamVector(spec, theta, tuple(blocks))


def _check_input(spec: ModelSpec, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.shape != spec.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model input {spec.input_shape}")
    return x


def apply(spec: ModelSpec, blocks: Sequence, x: Tensor) -> Tensor:
    """Forward pass with explicit parameter tensors (one per layout block)."""
    if len(spec.input_shape) == 3:
        h = ad.transpose(x, (2, 0, 1))
    else:
        h = ad.reshape(x, (spec.input_size,))
    it = iter(blocks)
    for layer in spec.layers:
        if isinstance(layer, Conv):
            wgt, bias = next(it), next(it)
            h = ad.conv2d(h, wgt, layer.padding)
            h = h + ad.reshape(bias, (layer.out_ch, 1, 1))
        elif isinstance(layer, Dense):
            wgt, bias = next(it), next(it)
            h = ad.reshape(ad.matmul(wgt, ad.reshape(h, (layer.in_features, 1))), (layer.out_features,))
            h = h + bias
        elif isinstance(layer, Pool):
            h = ad.max_pool2d(h) if layer.kind == "max" else ad.avg_pool2d(h)
        else:
            h = _ACTIVATIONS[layer.kind](h)
    return h


def forward(params: ParamVector, x) -> Tensor:
    """Logits f(x, theta) of length num_classes."""
    x = _check_input(params.spec, x)
    return apply(params.spec, [Tensor(b) for b in params.blocks()], x)


def check_onehot(y, k: int) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != (k,) or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
        raise ValueError(f"label must be a one-hot vector of length {k}")
    return y


def onehot(label: int, k: int) -> np.ndarray:
    y = np.zeros(k)
    y[label] = 1.0
    return y


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    """-sum(y * log_softmax(logits)); with one-hot y this is -log softmax[k0]."""
    return ad.neg(ad.tsum(ad.mul(ad.log_softmax(logits), Tensor(y))))


def loss_and_grad(
    params: ParamVector,
    x,
    y_onehot,
    create_graph: bool = False,
    tape: Tape | None = None,
):
    """Cross-entropy loss and its gradient w.r.t. all parameters.

    Returns ``(loss, g)``. Without ``create_graph`` the loss is a float and the
    tape is released. With it, the loss is a tape-attached Tensor, ``g.tensor``
    is differentiable, and the caller owns the tape (``x``'s tape if ``x`` is a
    watched Tensor).
    """
    y = check_onehot(y_onehot, params.spec.num_classes)
    if tape is None:
        tape = x.tape if isinstance(x, Tensor) and x.tape is not None else Tape()
    own_tape = not (isinstance(x, Tensor) and x.tape is tape) and not create_graph
    x = _check_input(params.spec, x)
    leaves = [tape.watch(b) for b in params.blocks()]
    loss = cross_entropy(apply(params.spec, leaves, x), y)
    grads = ad.grad(loss, leaves, create_graph=create_graph)
    if create_graph:
        flat = ad.concat(grads)
        return loss, FlatGradient(flat.data.copy(), params.layer_index, flat)
    values = np.concatenate([g.data.reshape(-1) for g in grads])
    value = loss.item()
    if own_tape:
        tape.release()
    return value, FlatGradient(values, params.layer_index)


def gradient(params: ParamVector, x, y_onehot) -> np.ndarray:
    """Plain gradient vector (convenience wrapper)."""
    return loss_and_grad(params, x, y_onehot)[1].values
