"""Feed-forward ReLU architectures with a flat parameter vector.

A :class:`ModelSpec` is a list of ``Dense``, ``Conv2d`` and ``Relu`` layers
acting on flat inputs. Without biases the network is positively homogeneous
in its parameters: scaling every weight by ``c`` scales the output by
``c ** L`` where ``L`` is the number of weight layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import EXACT, BackwardMode, Var


class NotHomogeneous(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = False


@dataclass(frozen=True)
class Conv2d:
    """Stride-1, unpadded convolution over (channels, height, width)."""

    kernel: int
    in_channels: int
    out_channels: int
    bias: bool = False


@dataclass(frozen=True)
class Relu:
    pass


_LAYER_TYPES = {"dense": Dense, "conv2d": Conv2d, "relu": Relu}


def _layer_to_dict(layer):
    kind = {Dense: "dense", Conv2d: "conv2d", Relu: "relu"}[type(layer)]
    return {"type": kind, **layer.__dict__}


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates composition

    @classmethod
    def mlp(cls, d: int, hidden, outputs: int = 1, bias: bool = False) -> ModelSpec:
        """``d - hidden[0] - ... - outputs`` with a ReLU after every hidden layer."""
        layers, width = [], d
        for h in hidden:
            layers += [Dense(width, h, bias), Relu()]
            width = h
        layers.append(Dense(width, outputs, bias))
        return cls((d,), tuple(layers))

    @classmethod
    def conv_mlp(cls, image_shape, kernel: int, channels: int, hidden,
                 outputs: int = 1, bias: bool = False) -> ModelSpec:
        """``Conv(kernel, channels) - hidden... - outputs``; conv output is flattened."""
        c, h, w = image_shape
        layers = [Conv2d(kernel, c, channels, bias), Relu()]
        width = channels * (h - kernel + 1) * (w - kernel + 1)
        for size in hidden:
            layers += [Dense(width, size, bias), Relu()]
            width = size
        layers.append(Dense(width, outputs, bias))
        return cls(tuple(image_shape), tuple(layers))

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape (without batch axis) after each layer."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                if int(np.prod(shape)) != layer.in_features:
                    raise ValueError(f"{layer} cannot follow activation shape {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ValueError(f"{layer} cannot follow activation shape {shape}")
                k = layer.kernel
                if shape[1] < k or shape[2] < k:
                    raise ValueError(f"kernel {k} larger than input {shape}")
                shape = (layer.out_channels, shape[1] - k + 1, shape[2] - k + 1)
            elif not isinstance(layer, Relu):
                raise TypeError(f"unknown layer {layer!r}")
            out.append(shape)
        return out

    @property
    def num_outputs(self) -> int:
        return int(np.prod(self.shapes()[-1])) if self.layers else self.input_dim

    def param_shapes(self) -> list[tuple[int, str, tuple[int, ...]]]:
        """(layer index, tensor name, shape) in flattening order."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                out.append((i, "weight", (layer.out_features, layer.in_features)))
                if layer.bias:
                    out.append((i, "bias", (layer.out_features,)))
            elif isinstance(layer, Conv2d):
                k = layer.kernel
                out.append((i, "weight", (layer.out_channels, layer.in_channels, k, k)))
                if layer.bias:
                    out.append((i, "bias", (layer.out_channels,)))
        return out

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [_layer_to_dict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            layers.append(_LAYER_TYPES[entry.pop("type")](**entry))
        return cls(tuple(d["input_shape"]), tuple(layers))


@dataclass(frozen=True)
class ParamVector:
    """Flattened parameters plus the (layer, name, offset, shape) layout."""

    theta: np.ndarray
    layout: tuple

    @classmethod
    def zeros(cls, spec: ModelSpec) -> ParamVector:
        layout, offset = [], 0
        for layer_id, name, shape in spec.param_shapes():
            layout.append((layer_id, name, offset, shape))
            offset += int(np.prod(shape))
        return cls(np.zeros(offset), tuple(layout))

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays) -> ParamVector:
        template = cls.zeros(spec)
        arrays = list(arrays)
        if len(arrays) != len(template.layout):
            raise ValueError("wrong number of parameter tensors")
        for a, (_, _, _, shape) in zip(arrays, template.layout):
            if np.shape(a) != tuple(shape):
                raise ValueError(f"parameter of shape {np.shape(a)}, expected {shape}")
        theta = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])
        return cls(theta, template.layout)

    @classmethod
    def from_theta(cls, spec: ModelSpec, theta) -> ParamVector:
        template = cls.zeros(spec)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != template.theta.shape:
            raise ValueError(f"theta has shape {theta.shape}, expected {template.theta.shape}")
        return cls(theta.copy(), template.layout)

    @property
    def size(self) -> int:
        return self.theta.size

    def arrays(self) -> list[np.ndarray]:
        return [self.theta[off:off + int(np.prod(shape))].reshape(shape)
                for _, _, off, shape in self.layout]

    def scaled(self, c: float) -> ParamVector:
        return ParamVector(self.theta * c, self.layout)


def homogeneity_degree(spec: ModelSpec) -> int:
    degree = 0
    for layer in spec.layers:
        if isinstance(layer, (Dense, Conv2d)):
            if layer.bias:
                raise NotHomogeneous(f"{layer} has a bias term")
            degree += 1
    return degree


def init_params(spec: ModelSpec, scheme: str = "standard", seed: int = 0,
                scale: float = 1e-4) -> ParamVector:
    """Gaussian weights with std ``1/sqrt(fan_in)``; biases start at zero.

    ``scheme="small_first_layer"`` redraws the first weight tensor with
    standard deviation ``scale``.
    """
    if scheme not in ("standard", "small_first_layer"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    if scheme == "small_first_layer" and not scale > 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    arrays = []
    first = True
    for _, name, shape in spec.param_shapes():
        if name == "bias":
            arrays.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:]))
        draw = rng.standard_normal(shape)
        if first and scheme == "small_first_layer":
            arrays.append(draw * scale)
        else:
            arrays.append(draw / np.sqrt(fan_in))
        first = False
    return ParamVector.from_arrays(spec, arrays)


def forward_graph(spec: ModelSpec, weights, x) -> Var:
    """Network output for a batch ``x`` of flat inputs, as an (n, C) graph node.

    ``weights`` holds one node per entry of ``spec.param_shapes()``.
    """
    h = ad.constant(x)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ValueError(f"expected inputs of shape (n, {spec.input_dim}), got {h.shape}")
    n = h.shape[0]
    h = ad.reshape(h, (n,) + spec.input_shape)
    w = iter(weights)
    for layer in spec.layers:
        if isinstance(layer, Dense):
            h = ad.reshape(h, (n, layer.in_features)) @ next(w).T
            if layer.bias:
                h = h + next(w)
        elif isinstance(layer, Conv2d):
            k = layer.kernel
            cols = ad.im2col(h, k)
            _, oh, ow, width = cols.shape
            kernel = ad.reshape(next(w), (layer.out_channels, width))
            h = ad.reshape(cols, (n * oh * ow, width)) @ kernel.T
            if layer.bias:
                h = h + next(w)
            h = ad.transpose(ad.reshape(h, (n, oh, ow, layer.out_channels)), (0, 3, 1, 2))
        else:
            h = ad.relu(h)
    return ad.reshape(h, (n, spec.num_outputs))


def network_forward(spec: ModelSpec, params: ParamVector, x) -> np.ndarray:
    """Outputs for a batch (n, C); a single output column is squeezed to (n,)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = forward_graph(spec, [ad.constant(a) for a in params.arrays()],
                        x[None] if single else x).value
    if spec.num_outputs == 1:
        out = out[:, 0]
    return out[0] if single else out


# -- scalar functionals of the network output ------------------------------

@dataclass(frozen=True)
class Output:
    """The j-th output."""

    j: int = 0

    def __call__(self, out: Var, n_classes: int) -> Var:
        if not 0 <= self.j < n_classes:
            raise ValueError(f"output index {self.j} out of range for {n_classes} outputs")
        return ad.pick(out, np.full(out.shape[0], self.j))


@dataclass(frozen=True)
class SignedOutput:
    """y * Phi for single-output models; y may be a vector over the batch."""

    y: object

    def __call__(self, out: Var, n_classes: int) -> Var:
        if n_classes != 1:
            raise ValueError("SignedOutput needs a single-output model")
        return ad.reshape(out, (out.shape[0],)) * np.broadcast_to(
            np.asarray(self.y, dtype=np.float64), (out.shape[0],))


@dataclass(frozen=True)
class MarginGap:
    """Phi_y - max_{j != y} Phi_j."""

    y: object

    def __call__(self, out: Var, n_classes: int) -> Var:
        y = np.broadcast_to(np.asarray(self.y, dtype=np.int64), (out.shape[0],))
        if n_classes < 2:
            raise ValueError("MarginGap needs at least two outputs")
        if np.any((y < 0) | (y >= n_classes)):
            raise ValueError(f"class index out of range for {n_classes} outputs")
        return ad.pick(out, y) - ad.max_other(out, y)


def weight_leaves(params: ParamVector) -> list[Var]:
    return [ad.variable(a) for a in params.arrays()]


def weighted_param_gradient(spec: ModelSpec, leaves, X, coeffs, functional,
                            mode: BackwardMode = EXACT) -> list[Var]:
    """Per-tensor gradient of ``sum_i coeffs_i * functional(Phi(x_i))`` w.r.t. the weights.

    This equals ``sum_i coeffs_i * grad_theta functional(Phi(x_i))``; the result
    stays differentiable with respect to ``X`` and ``coeffs``.
    """
    out = forward_graph(spec, leaves, X)
    values = functional(out, spec.num_outputs)
    return ad.gradient((values * coeffs).sum(), leaves, mode)


def flatten_nodes(nodes) -> Var:
    return ad.concat([ad.reshape(g, (g.value.size,)) for g in nodes])


def param_gradient(spec: ModelSpec, params: ParamVector, x, functional,
                   mode: BackwardMode = EXACT) -> Var:
    """Flat gradient (length p) of a scalar functional of Phi(x) for one sample."""
    x = ad.constant(x)
    if x.ndim != 1:
        raise ValueError("param_gradient takes a single sample")
    leaves = weight_leaves(params)
    grads = weighted_param_gradient(spec, leaves, ad.reshape(x, (1, x.shape[0])),
                                    ad.constant(np.ones(1)), functional, mode)
    return flatten_nodes(grads)
