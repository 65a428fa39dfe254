"""Minimal feed-forward engine: dense and conv2d layers, patches, forward traces.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Batches always
carry the batch axis first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("relu", "identity", "softmax")


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer or network it is fed to."""


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Return ``data`` as a finite float64 array, optionally reshaped."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    flat = z.reshape(z.shape[0], -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).reshape(z.shape)


def apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return relu(z)
    if name == "identity":
        return z.copy()
    if name == "softmax":
        return softmax(z)
    raise ValueError(f"unknown activation {name!r}")


def frobenius_norm(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(np.sqrt(np.sum(w * w)))


def quadrant_split(v) -> Tuple[np.ndarray, np.ndarray]:
    """Split ``v`` into nonnegative parts with ``v == plus - minus`` exactly."""
    v = np.asarray(v, dtype=np.float64)
    plus = np.where(v > 0, v, 0.0)
    minus = np.where(v < 0, -v, 0.0)
    return plus, minus


# (weight sign, activation sign) for the four quadrants, in the order ++, +-, -+, --.
QUADRANTS = ((0, 0), (0, 1), (1, 0), (1, 1))
QUADRANT_SIGNS = (1.0, -1.0, -1.0, 1.0)


@dataclass
class LayerSpec:
    """One linear map followed by an activation.

    ``kind`` is ``"dense"`` (weights ``(out_features, in_features)``) or
    ``"conv2d"`` (weights ``(out_channels, in_channels, kernel_h, kernel_w)``).
    """

    kind: str
    weights: np.ndarray
    activation: str = "relu"
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = as_tensor(self.weights)
        if self.kind == "dense":
            if self.weights.ndim != 2:
                raise ShapeError("dense weights must be 2-D (out_features, in_features)")
        elif self.kind == "conv2d":
            if self.weights.ndim != 4:
                raise ShapeError("conv2d weights must be 4-D (out, in, kh, kw)")
            if self.stride < 1 or self.padding < 0:
                raise ValueError("stride must be >= 1 and padding >= 0")
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.bias is not None:
            self.bias = as_tensor(self.bias).reshape(-1)
            if self.bias.size != self.out_channels:
                raise ShapeError(f"bias length {self.bias.size} != {self.out_channels}")

    @classmethod
    def dense(cls, weights, activation="relu", bias=None) -> "LayerSpec":
        return cls("dense", weights, activation, bias)

    @classmethod
    def conv2d(cls, weights, activation="relu", bias=None, stride=1, padding=0) -> "LayerSpec":
        return cls("conv2d", weights, activation, bias, stride, padding)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def group_count(self) -> int:
        return self.weights.shape[0]

    @property
    def group_size(self) -> int:
        return int(np.prod(self.weights.shape[1:]))

    def group_matrix(self, weights: Optional[np.ndarray] = None) -> np.ndarray:
        """Weights as ``(groups, group_size)``; row ``i`` is parameter group ``i``."""
        w = self.weights if weights is None else weights
        return w.reshape(w.shape[0], -1)

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if self.kind == "dense":
            if int(np.prod(input_shape)) != self.weights.shape[1]:
                raise ShapeError(
                    f"dense layer expects {self.weights.shape[1]} inputs, got shape {input_shape}")
            return (self.weights.shape[0],)
        if len(input_shape) != 3 or input_shape[0] != self.weights.shape[1]:
            raise ShapeError(
                f"conv2d layer expects ({self.weights.shape[1]}, H, W) input, got {input_shape}")
        _, h, w = input_shape
        kh, kw = self.weights.shape[2:]
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {kh}x{kw} does not fit input {input_shape}")
        return (self.weights.shape[0], ho, wo)

    def unfold(self, a_prev: np.ndarray) -> np.ndarray:
        """Patches of a batch of layer inputs, shape ``(batch, patches, group_size)``.

        Each patch is aligned index-for-index with a flattened parameter group.
        """
        if self.kind == "dense":
            return a_prev.reshape(a_prev.shape[0], 1, -1)
        kh, kw = self.weights.shape[2:]
        p, s = self.padding, self.stride
        if p:
            a_prev = np.pad(a_prev, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(a_prev, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        b, c, ho, wo = win.shape[:4]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)

    def linear(self, a_prev: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
        """Bias-free linear map ``W * a_prev`` for a batch."""
        w = self.group_matrix(weights)
        if self.kind == "dense":
            return a_prev.reshape(a_prev.shape[0], -1) @ w.T
        patches = self.unfold(a_prev)
        out = np.einsum("bpd,od->bop", patches, w)
        ho, wo = self.output_shape(a_prev.shape[1:])[1:]
        return out.reshape(a_prev.shape[0], w.shape[0], ho, wo)

    def bias_view(self, ndim: int) -> np.ndarray:
        """Bias broadcastable against a pre-activation batch (zeros if absent)."""
        b = self.bias if self.bias is not None else np.zeros(self.out_channels)
        return b.reshape((1, -1) + (1,) * (ndim - 2))

    def preactivation(self, a_prev: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
        z = self.linear(a_prev, weights)
        if self.bias is not None:
            z = z + self.bias_view(z.ndim)
        return z

    def with_weights(self, weights: np.ndarray) -> "LayerSpec":
        return LayerSpec(self.kind, weights.reshape(self.weights.shape), self.activation,
                         None if self.bias is None else self.bias.copy(),
                         self.stride, self.padding)


@dataclass
class ForwardTrace:
    """Pre-activations ``Z[l]`` and activations ``A[l]``; ``A[0]`` is the input batch.

    ``Z[0]`` is ``None`` so that indices line up with 1-based layer numbers.
    """

    Z: List[Optional[np.ndarray]]
    A: List[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.A[-1]


@dataclass
class Network:
    input_shape: Tuple[int, ...]
    layers: List[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.input_shape
        for idx, layer in enumerate(self.layers):
            if layer.activation == "softmax" and idx != len(self.layers) - 1:
                raise ValueError("softmax is only allowed on the final layer")
            shape = layer.output_shape(shape)

    @property
    def L(self) -> int:
        return len(self.layers)

    def layer(self, ell: int) -> LayerSpec:
        """Layer ``ell`` using 1-based numbering."""
        if not 1 <= ell <= self.L:
            raise IndexError(f"layer index {ell} out of range 1..{self.L}")
        return self.layers[ell - 1]

    def shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample activation shapes ``A^0 .. A^L``."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    def patch_counts(self) -> List[int]:
        """Output scalars per layer (eta^l), i.e. patches per group times groups."""
        return [int(np.prod(s)) for s in self.shapes()[1:]]

    def max_group_size(self) -> int:
        return max(layer.group_size for layer in self.layers)

    def prunable_count(self) -> int:
        return sum(layer.weights.size for layer in self.layers)

    def with_weights(self, weights: Sequence[np.ndarray]) -> "Network":
        return Network(self.input_shape,
                       [layer.with_weights(w) for layer, w in zip(self.layers, weights)])

    def check_batch(self, batch) -> np.ndarray:
        batch = as_tensor(batch)
        if batch.ndim < 1 or batch.shape[0] < 1 or tuple(batch.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {batch.shape} does not match (B,)+{self.input_shape}")
        return batch


def forward(net: Network, batch) -> ForwardTrace:
    a = net.check_batch(batch)
    Z: List[Optional[np.ndarray]] = [None]
    A = [a]
    for layer in net.layers:
        z = layer.preactivation(a)
        a = apply_activation(layer.activation, z)
        Z.append(z)
        A.append(a)
    return ForwardTrace(Z, A)


def predict(net: Network, batch) -> np.ndarray:
    return forward(net, batch).output


def extract_patches(net: Network, ell: int, i: int, a_prev) -> np.ndarray:
    """Patch matrix ``(patches, group_size)`` of group ``i`` in layer ``ell`` for one input.

    ``a_prev`` is a single (unbatched) input activation of layer ``ell``.
    Every group in a layer sees the same patches; ``i`` is validated only.
    """
    layer = net.layer(ell)
    if not 0 <= i < layer.group_count:
        raise IndexError(f"group index {i} out of range for layer {ell}")
    a_prev = as_tensor(a_prev)
    expected = net.shapes()[ell - 1]
    if int(np.prod(a_prev.shape)) != int(np.prod(expected)) or (
            layer.kind == "conv2d" and a_prev.shape != expected):
        raise ShapeError(f"input shape {a_prev.shape} does not match layer {ell} input {expected}")
    return layer.unfold(a_prev.reshape((1,) + expected))[0]
