"""Training objective: detection loss plus gate-sparsity and scale penalties."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .exceptions import ArgumentError
from .tensor import Tensor, as_tensor

DEFAULT_LAMBDA_SPS = 1e-4
DEFAULT_LAMBDA_ADP = 2e-5


@dataclass(frozen=True)
class LossConfig:
    lambda_sps: float = DEFAULT_LAMBDA_SPS
    lambda_adp: float = DEFAULT_LAMBDA_ADP
    box_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda_sps", "lambda_adp", "box_weight"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ArgumentError(f"{name} must be a finite nonnegative number, got {v}")


def detection_loss(class_logits, box_deltas, cls_targets, box_targets, box_weight: float = 1.0) -> Tensor:
    """Mean cross-entropy over all cells plus ``box_weight`` times mean
    smooth-L1 over foreground cells (class > 0). The box term is 0 if no
    cell is foreground."""
    class_logits = as_tensor(class_logits)
    cls_targets = np.asarray(cls_targets)
    if class_logits.ndim != 2 or class_logits.shape[0] == 0:
        raise ArgumentError("detection_loss needs at least one anchor cell")
    cls_term = ops.softmax_cross_entropy(class_logits, cls_targets)
    fg = (cls_targets > 0).astype(class_logits.dtype)
    box_term = ops.smooth_l1(box_deltas, box_targets, weights=fg)
    if box_weight == 1.0:
        return cls_term + box_term
    return cls_term + ops.scale(box_term, box_weight)


def sparsity_loss(gates: Sequence) -> Tensor:
    """Number of open gates. Tensor gates keep their graph (STE gradient)."""
    gates = list(gates)
    if not gates:
        return Tensor(np.zeros((), np.float32))
    if all(not isinstance(g, Tensor) for g in gates):
        return Tensor(np.asarray(np.sum(np.asarray(gates, dtype=np.float64)), dtype=np.float32))
    total = as_tensor(gates[0])
    for g in gates[1:]:
        total = total + g
    return ops.reduce_sum(total)


def adaptation_loss(scales: Sequence) -> Tensor:
    """Sum of squared per-layer scales."""
    scales = list(scales)
    if not scales:
        return Tensor(np.zeros((), np.float32))
    if all(not isinstance(s, Tensor) for s in scales):
        a = np.asarray(scales, dtype=np.float64)
        return Tensor(np.asarray(np.sum(a * a)))
    total = None
    for s in scales:
        s = as_tensor(s)
        sq = ops.reduce_sum(s * s)
        total = sq if total is None else total + sq
    return total


def total_loss(det, sps, adp, cfg: LossConfig = LossConfig()):
    """``det + lambda_sps * sps + lambda_adp * adp``.

    Works on plain floats or on Tensors (then the result is on the graph).
    """
    if not any(isinstance(v, Tensor) for v in (det, sps, adp)):
        return float(det) + cfg.lambda_sps * float(sps) + cfg.lambda_adp * float(adp)
    out = as_tensor(det)
    if cfg.lambda_sps:
        out = out + ops.scale(as_tensor(sps), cfg.lambda_sps)
    if cfg.lambda_adp:
        out = out + ops.scale(as_tensor(adp), cfg.lambda_adp)
    return out
