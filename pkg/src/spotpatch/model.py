"""Layer specifications, the frozen source model and the plain forward pass.

A model is an ordered list of layers. ``dense`` and ``conv`` layers carry a
weight (no bias); ``batchnorm`` layers carry scale/shift and running
statistics. The nonlinearity (ReLU) is applied after every layer except the
last one, but it is deferred past a directly following batchnorm layer, so
``conv -> bn -> relu`` is the usual block and the final layer is linear.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .exceptions import ConfigurationError, DimensionError
from .tensor import DEFAULT_DTYPE, Tensor

LAYER_KINDS = ("dense", "conv", "batchnorm")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    shape: tuple
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        expected = {"dense": 2, "conv": 4, "batchnorm": 1}[self.kind]
        if len(self.shape) != expected:
            raise ConfigurationError(f"{self.kind} layer needs a {expected}-d shape, got {self.shape}")

    @property
    def patchable(self) -> bool:
        return self.kind != "batchnorm"

    @property
    def num_params(self) -> int:
        n = int(np.prod(self.shape))
        return 4 * n if self.kind == "batchnorm" else n

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shape": list(self.shape), "stride": self.stride, "pad": self.pad}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], tuple(d["shape"]), d.get("stride", 1), d.get("pad", 0))


@dataclass
class BNParams:
    """Batch-norm state of one layer: scale, shift, running mean and variance."""

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    ARRAYS = ("scale", "shift", "running_mean", "running_var")

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BNParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))

    def copy(self) -> "BNParams":
        return BNParams(*(getattr(self, a).copy() for a in self.ARRAYS))

    def arrays(self):
        return [getattr(self, a) for a in self.ARRAYS]

    def __eq__(self, other):
        if not isinstance(other, BNParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


class SourceModel:
    """Frozen pre-trained parameters: one weight per patchable layer and one
    :class:`BNParams` per batchnorm layer, keyed by layer index.

    Arrays are marked read-only so the model can be shared between trainings.
    """

    def __init__(self, layers: Sequence[LayerSpec], weights: Dict[int, np.ndarray],
                 bn: Dict[int, BNParams], meta: Optional[dict] = None):
        self.layers = list(layers)
        self.weights = {}
        self.bn = {}
        for i, spec in enumerate(self.layers):
            if spec.patchable:
                if i not in weights:
                    raise ConfigurationError(f"missing weight for layer {i}")
                w = np.array(weights[i], dtype=DEFAULT_DTYPE)
                if w.shape != spec.shape:
                    raise DimensionError(f"layer {i}: weight {w.shape} != spec {spec.shape}")
                w.setflags(write=False)
                self.weights[i] = w
            else:
                if i not in bn:
                    raise ConfigurationError(f"missing batchnorm state for layer {i}")
                p = bn[i].copy()
                for a in p.arrays():
                    a.setflags(write=False)
                self.bn[i] = p
        self.meta = dict(meta or {})

    @property
    def patchable_layers(self) -> List[int]:
        return [i for i, s in enumerate(self.layers) if s.patchable]

    @property
    def bn_layers(self) -> List[int]:
        return [i for i, s in enumerate(self.layers) if not s.patchable]

    def bn_copy(self) -> Dict[int, BNParams]:
        return {i: p.copy() for i, p in self.bn.items()}

    def num_params(self) -> int:
        return sum(s.num_params for s in self.layers)

    def save(self, path):
        arrays = {f"w{i}": w for i, w in self.weights.items()}
        for i, p in self.bn.items():
            for name in BNParams.ARRAYS:
                arrays[f"bn{i}_{name}"] = getattr(p, name)
        arrays["layers_json"] = np.frombuffer(
            json.dumps({"layers": [s.to_dict() for s in self.layers], "meta": self.meta}).encode(),
            dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "SourceModel":
        with np.load(path) as z:
            header = json.loads(bytes(z["layers_json"]).decode())
            layers = [LayerSpec.from_dict(d) for d in header["layers"]]
            weights, bn = {}, {}
            for i, s in enumerate(layers):
                if s.patchable:
                    weights[i] = z[f"w{i}"]
                else:
                    bn[i] = BNParams(*(z[f"bn{i}_{a}"].copy() for a in BNParams.ARRAYS))
        return cls(layers, weights, bn, header.get("meta"))


def apply_layer(spec: LayerSpec, h: Tensor, weight: Tensor) -> Tensor:
    if spec.kind == "conv":
        return ops.conv2d(h, weight, spec.stride, spec.pad)
    if h.ndim != 2 or h.shape[1] != spec.shape[1]:
        raise DimensionError(f"dense layer {spec.shape} got input {h.shape}")
    return ops.matmul(h, ops.permute(weight, (1, 0)))


def run_layers(layers: Sequence[LayerSpec], x, weight_fn, bn_fn, training: bool) -> Tensor:
    """Shared forward loop.

    ``weight_fn(i)`` returns the effective weight Tensor of patchable layer i;
    ``bn_fn(i)`` returns ``(scale, shift, BNParams, train_mode)`` for batchnorm
    layer i. Both the source and every patched model go through this loop.
    """
    h = x if isinstance(x, Tensor) else Tensor(x)
    n = len(layers)
    for i, spec in enumerate(layers):
        if spec.patchable:
            h = apply_layer(spec, h, weight_fn(i))
        else:
            scale, shift, state, train_bn = bn_fn(i)
            h = ops.batchnorm(h, scale, shift, state.running_mean, state.running_var,
                              training=training and train_bn)
        last = i == n - 1
        next_is_bn = not last and layers[i + 1].kind == "batchnorm"
        if not last and not next_is_bn:
            h = ops.relu(h)
    return h


def forward_source(model: SourceModel, x, training: bool = False) -> Tensor:
    """Forward pass of the unmodified source model (eval-mode batchnorm)."""
    def weight_fn(i):
        return Tensor(model.weights[i])

    def bn_fn(i):
        p = model.bn[i]
        return Tensor(p.scale), Tensor(p.shift), p, False

    return run_layers(model.layers, x, weight_fn, bn_fn, training=False)


DEFAULT_WIDTHS = (16, 24, 24, 32, 32, 48, 48)
DEFAULT_STRIDES = (2, 1, 2, 1, 2, 1, 1)


def detector_layers(in_channels: int = 3, widths=DEFAULT_WIDTHS, strides=DEFAULT_STRIDES,
                    head_out: int = 8) -> List[LayerSpec]:
    """Default toy detector: 3x3 conv+bn blocks and a 1x1 conv grid head."""
    layers = []
    c = in_channels
    for w, s in zip(widths, strides):
        layers.append(LayerSpec("conv", (w, c, 3, 3), stride=s, pad=1))
        layers.append(LayerSpec("batchnorm", (w,)))
        c = w
    layers.append(LayerSpec("conv", (head_out, c, 1, 1)))
    return layers


def init_model(layers: Sequence[LayerSpec], rng: np.random.Generator) -> SourceModel:
    """He-normal weights and identity batchnorm."""
    weights, bn = {}, {}
    for i, s in enumerate(layers):
        if s.patchable:
            fan_in = int(np.prod(s.shape[1:]))
            weights[i] = (rng.standard_normal(s.shape) * np.sqrt(2.0 / fan_in)).astype(DEFAULT_DTYPE)
        else:
            bn[i] = BNParams.fresh(s.shape[0])
    return SourceModel(layers, weights, bn)


def clone_params(model: SourceModel):
    """Writable copies of the model's weights and batchnorm state."""
    return ({i: w.copy() for i, w in model.weights.items()}, model.bn_copy())


def with_params(model: SourceModel, weights, bn, meta=None) -> SourceModel:
    return SourceModel(model.layers, weights, bn, meta if meta is not None else copy.deepcopy(model.meta))
