"""Per-layer weight transforms, gating and execution of patched models.

A patched layer uses ``W' = W + g * omega * (1 - 2M)`` where ``M`` is a
binary mask and ``g`` a binary gate, both obtained by thresholding real
logits. Baselines are degenerate configurations of the same machinery.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import ops
from .exceptions import ArgumentError, ConfigurationError, DimensionError
from .model import BNParams, SourceModel, clone_params, run_layers
from .patch_format import DeployedPatch, LayerPatch
from .tensor import DEFAULT_DTYPE, Tensor, as_tensor

MASK_INIT_RANGE = 0.01
SCALE_INIT = 0.001
GATE_INIT = 0.5
PIGGYBACK_MASK_INIT = 0.01


class PatchMode(str, enum.Enum):
    SPOTPATCH = "spotpatch"
    WEIGHT_TRANSFORM = "weight-transform"
    BN_ONLY = "bn-only"
    PIGGYBACK = "piggyback"
    FINE_TUNE = "fine-tune"

    @classmethod
    def parse(cls, value) -> "PatchMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("_", "-"))
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ConfigurationError(f"unknown patch mode {value!r}; expected one of {names}") from None

    @property
    def uses_masks(self) -> bool:
        return self in (PatchMode.SPOTPATCH, PatchMode.WEIGHT_TRANSFORM, PatchMode.PIGGYBACK)

    @property
    def trains_bn(self) -> bool:
        return self in (PatchMode.SPOTPATCH, PatchMode.WEIGHT_TRANSFORM, PatchMode.BN_ONLY,
                        PatchMode.FINE_TUNE)


def _check_binary(m: np.ndarray, what: str):
    if m.size and not np.isin(m, (0, 1)).all():
        raise ArgumentError(f"{what} must be 0/1 valued")


def sign_from_mask(mask) -> Tensor:
    """``S = 1 - 2M``: 0 -> +1, 1 -> -1."""
    m = as_tensor(mask)
    _check_binary(m.data, "mask")
    return 1.0 - ops.scale(m, 2.0)


def mask_from_sign(sign) -> np.ndarray:
    s = np.asarray(sign.data if isinstance(sign, Tensor) else sign)
    if s.size and not np.isin(s, (-1, 1)).all():
        raise ArgumentError("sign matrix must be +-1 valued")
    return ((1 - s) / 2).astype(s.dtype)


def gated_transform(weight, gate, scale, mask) -> Tensor:
    """``W + g * omega * (1 - 2M)``; returns ``W`` itself when the gate is 0.

    ``gate``, ``scale`` are scalars (0-d or one-element), ``mask`` has the
    weight's shape. All four may be Tensors on the autodiff graph.
    """
    w, g, s, m = (as_tensor(v) for v in (weight, gate, scale, mask))
    if m.shape != w.shape:
        raise DimensionError(f"mask {m.shape} does not match weight {w.shape}")
    if g.size != 1 or s.size != 1:
        raise DimensionError("gate and scale must be scalars")
    gv = g.data.reshape(-1)[0]
    if gv not in (0, 1):
        raise ArgumentError(f"gate must be 0 or 1, got {gv}")
    _check_binary(m.data, "mask")
    dt = w.dtype.type
    omega = dt(s.data.reshape(-1)[0])
    sign = dt(1) - dt(2) * m.data.astype(w.dtype, copy=False)
    out = w.data if gv == 0 else w.data + omega * sign

    def backward(grad):
        gw = grad
        gg = np.asarray(np.sum(grad * sign) * omega, dtype=g.dtype).reshape(g.shape)
        gs = np.asarray(np.sum(grad * sign) * gv, dtype=s.dtype).reshape(s.shape)
        gm = (grad * (dt(-2) * gv * omega)).astype(m.dtype, copy=False)
        return gw, gg, gs, gm

    return Tensor._from_op(out, (w, g, s, m), backward, "gated_transform")


def weight_transform(weight, scale, mask) -> Tensor:
    """``W + omega * (1 - 2M)``."""
    w = as_tensor(weight)
    return gated_transform(w, np.ones((), w.dtype), scale, mask)


def piggyback_transform(weight, mask) -> Tensor:
    """Elementwise ``W * M``."""
    w, m = as_tensor(weight), as_tensor(mask)
    if m.shape != w.shape:
        raise DimensionError(f"mask {m.shape} does not match weight {w.shape}")
    return ops.mul(w, m)


@dataclass
class TaskBN:
    """Trainable task-specific batch norm: scale/shift Tensors plus running stats."""

    scale: Tensor
    shift: Tensor
    state: BNParams

    @classmethod
    def from_source(cls, p: BNParams, trainable: bool = True) -> "TaskBN":
        q = p.copy()
        return cls(Tensor(q.scale, requires_grad=trainable), Tensor(q.shift, requires_grad=trainable), q)

    def to_params(self) -> BNParams:
        return BNParams(self.scale.data.copy(), self.shift.data.copy(),
                        self.state.running_mean.copy(), self.state.running_var.copy())


@dataclass
class PatchTrainState:
    """Trainable patch variables, keyed by model layer index.

    ``mask_logits``/``gate_logits``/``scales`` hold one entry per patchable
    layer when present; ``bn`` one entry per batch-norm layer; ``weights``
    (fine-tune only) a trainable copy of each source weight.
    """

    mask_logits: Dict[int, Tensor] = field(default_factory=dict)
    gate_logits: Dict[int, Tensor] = field(default_factory=dict)
    scales: Dict[int, Tensor] = field(default_factory=dict)
    bn: Dict[int, TaskBN] = field(default_factory=dict)
    weights: Dict[int, Tensor] = field(default_factory=dict)

    def parameter_groups(self) -> Dict[str, list]:
        groups = {
            "masks": list(self.mask_logits.values()),
            "gates": list(self.gate_logits.values()),
            "scales": list(self.scales.values()),
            "bn": [t for b in self.bn.values() for t in (b.scale, b.shift)],
            "weights": list(self.weights.values()),
        }
        return {k: [t for t in v if t.requires_grad] for k, v in groups.items()}

    def gate_values(self) -> Dict[int, int]:
        return {i: int(f.data.reshape(-1)[0] >= 0) for i, f in self.gate_logits.items()}


def init_state(model: SourceModel, mode, rng: Optional[np.random.Generator] = None,
               mask_init_range: float = MASK_INIT_RANGE, scale_init: float = SCALE_INIT,
               gate_init: float = GATE_INIT) -> PatchTrainState:
    """Fresh trainable state for ``mode``; task batch norm starts as a copy of the source."""
    mode = PatchMode.parse(mode)
    rng = rng if rng is not None else np.random.default_rng(0)
    st = PatchTrainState()
    for i in model.patchable_layers:
        shape = model.layers[i].shape
        if mode in (PatchMode.SPOTPATCH, PatchMode.WEIGHT_TRANSFORM):
            r = rng.uniform(-mask_init_range, mask_init_range, size=shape).astype(DEFAULT_DTYPE)
            st.mask_logits[i] = Tensor(r, requires_grad=True)
            st.scales[i] = Tensor(np.array(scale_init, DEFAULT_DTYPE), requires_grad=True)
            if mode is PatchMode.SPOTPATCH:
                st.gate_logits[i] = Tensor(np.array(gate_init, DEFAULT_DTYPE), requires_grad=True)
        elif mode is PatchMode.PIGGYBACK:
            st.mask_logits[i] = Tensor(np.full(shape, PIGGYBACK_MASK_INIT, DEFAULT_DTYPE),
                                       requires_grad=True)
        elif mode is PatchMode.FINE_TUNE:
            st.weights[i] = Tensor(model.weights[i].copy(), requires_grad=True)
    if mode.trains_bn:
        for i in model.bn_layers:
            st.bn[i] = TaskBN.from_source(model.bn[i])
    return st


def identity_state(model: SourceModel) -> PatchTrainState:
    """SpotPatch state whose gates are all closed and batch norm copies the source."""
    st = init_state(model, PatchMode.SPOTPATCH)
    for f in st.gate_logits.values():
        f.data[...] = -1.0
    return st


def _require(cond: bool, what: str, mode: PatchMode):
    if not cond:
        raise ConfigurationError(f"{mode.value} mode requires {what} in the patch state")


def forward_patched(model: SourceModel, state: PatchTrainState, mode, x,
                    training: bool = False) -> Tensor:
    """Run ``model`` with its weights replaced according to ``mode``.

    Masks and gates are thresholded with the straight-through binarizer, so
    the same call serves training (graph recorded) and evaluation.
    """
    mode = PatchMode.parse(mode)
    patchable = model.patchable_layers
    if mode.uses_masks:
        _require(all(i in state.mask_logits for i in patchable), "mask logits for every weight layer", mode)
    if mode in (PatchMode.SPOTPATCH, PatchMode.WEIGHT_TRANSFORM):
        _require(all(i in state.scales for i in patchable), "a scale for every weight layer", mode)
    if mode is PatchMode.SPOTPATCH:
        _require(all(i in state.gate_logits for i in patchable), "a gate logit for every weight layer", mode)
    if mode is PatchMode.FINE_TUNE:
        _require(all(i in state.weights for i in patchable), "weights for every layer", mode)
    if mode.trains_bn:
        _require(all(i in state.bn for i in model.bn_layers), "task batch norm", mode)

    def weight_fn(i):
        w = Tensor(model.weights[i])
        if mode is PatchMode.BN_ONLY:
            return w
        if mode is PatchMode.FINE_TUNE:
            return state.weights[i]
        m = ops.binarize_ste(state.mask_logits[i])
        if mode is PatchMode.PIGGYBACK:
            return piggyback_transform(w, m)
        if mode is PatchMode.WEIGHT_TRANSFORM:
            g = Tensor(np.ones((), w.dtype))
        else:
            g = ops.binarize_ste(state.gate_logits[i])
        return gated_transform(w, g, state.scales[i], m)

    def bn_fn(i):
        if mode.trains_bn:
            b = state.bn[i]
            return b.scale, b.shift, b.state, True
        p = model.bn[i]
        return Tensor(p.scale), Tensor(p.shift), p, False

    return run_layers(model.layers, x, weight_fn, bn_fn, training)


def deploy(model: SourceModel, state: PatchTrainState, mode) -> DeployedPatch:
    """Binarize the trained state once into the shippable patch."""
    mode = PatchMode.parse(mode)
    if mode is PatchMode.FINE_TUNE:
        raise ConfigurationError("fine-tune produces a full model, not a patch")
    layers = []
    for i, spec in enumerate(model.layers):
        if spec.patchable:
            if mode is PatchMode.BN_ONLY:
                layers.append(LayerPatch(i, gate=False))
                continue
            mask = (state.mask_logits[i].data >= 0).astype(np.uint8).reshape(-1)
            if mode is PatchMode.PIGGYBACK:
                layers.append(LayerPatch(i, True, mask, multiplicative=True))
                continue
            gate = True if mode is PatchMode.WEIGHT_TRANSFORM else bool(state.gate_logits[i].data >= 0)
            if gate:
                layers.append(LayerPatch(i, True, mask, np.float32(state.scales[i].data)))
            else:
                layers.append(LayerPatch(i, gate=False))
        elif mode.trains_bn:
            layers.append(LayerPatch(i, bn=state.bn[i].to_params()))
    return DeployedPatch(layers)


def apply_patch(model: SourceModel, patch: DeployedPatch):
    """Effective weights and batch norm of the patched model as numpy arrays."""
    weights = {i: w for i, w in model.weights.items()}
    bn = dict(model.bn)
    for lp in patch.layers:
        i = lp.layer_id
        if i >= len(model.layers):
            raise ConfigurationError(f"patch layer {i} not in model")
        spec = model.layers[i]
        if lp.bn is not None:
            if spec.patchable:
                raise ConfigurationError(f"batch-norm payload on weight layer {i}")
            bn[i] = lp.bn
        if lp.gate:
            w = model.weights[i]
            m = lp.mask.reshape(w.shape)
            if lp.multiplicative:
                weights[i] = w * m.astype(w.dtype)
            else:
                weights[i] = gated_transform(w, np.ones((), w.dtype), lp.scale, m.astype(w.dtype)).data
    return weights, bn


def forward_deployed(model: SourceModel, patch: DeployedPatch, x) -> Tensor:
    """Eval-mode forward pass of ``model`` with a deployed patch applied."""
    weights, bn = apply_patch(model, patch)

    def bn_fn(i):
        p = bn[i]
        return Tensor(p.scale), Tensor(p.shift), p, False

    return run_layers(model.layers, x, lambda i: Tensor(weights[i]), bn_fn, training=False)


def effective_weights(model: SourceModel, state: PatchTrainState, mode) -> Dict[int, np.ndarray]:
    """Current (binarized) effective weights of every patchable layer."""
    mode = PatchMode.parse(mode)
    out = {}
    for i in model.patchable_layers:
        w = model.weights[i]
        if mode is PatchMode.BN_ONLY:
            out[i] = w
        elif mode is PatchMode.FINE_TUNE:
            out[i] = state.weights[i].data
        else:
            m = (state.mask_logits[i].data >= 0).astype(w.dtype)
            if mode is PatchMode.PIGGYBACK:
                out[i] = w * m
            else:
                g = 1 if mode is PatchMode.WEIGHT_TRANSFORM else int(state.gate_logits[i].data >= 0)
                out[i] = gated_transform(w, np.array(g, w.dtype), state.scales[i].data, m).data
    return out
