"""scikit-learn style estimators for the grid detector.

:class:`GridDetector` trains a source model from scratch;
:class:`PatchedDetector` learns a task patch on top of a frozen source model.
Both accept ``X`` as images ``[N, C, H, W]`` and ``y`` as a list of per-image
annotation arrays ``[n_i, 5]`` (``xmin, ymin, xmax, ymax, class``).
"""
from __future__ import annotations

import logging
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import ops
from .data import decode_boxes, encode_targets
from .evalmetrics import Box, iou, map_at_50
from .exceptions import ArgumentError, ConfigurationError, DimensionError, RunError
from .losses import LossConfig, adaptation_loss, detection_loss, sparsity_loss, total_loss
from .model import DEFAULT_STRIDES, DEFAULT_WIDTHS, SourceModel, detector_layers, forward_source, init_model, run_layers
from .optim import make_optimizer
from .patch_format import DeployedPatch, FootprintReport, finetune_footprint, footprint
from .patching import PatchMode, TaskBN, deploy, forward_deployed, forward_patched, init_state
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SCORE_THRESHOLD = 0.05
NMS_IOU = 0.5


# -- input validation ----------------------------------------------------------

def check_images(X, channels: Optional[int] = None, image_size: Optional[int] = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise DimensionError(f"images must be [N, C, H, W], got shape {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise DimensionError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if channels is not None and X.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {X.shape[1]}")
    if image_size is not None and X.shape[2] != image_size:
        raise DimensionError(f"expected {image_size}x{image_size} images, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ArgumentError("images contain non-finite values")
    return X


def check_annotations(y, n_images: int, n_classes: Optional[int] = None) -> List[np.ndarray]:
    if y is None or len(y) != n_images:
        raise ArgumentError(f"need one annotation array per image ({n_images})")
    out = []
    for k, a in enumerate(y):
        a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
        if np.any(a[:, 2] <= a[:, 0]) or np.any(a[:, 3] <= a[:, 1]):
            raise ArgumentError(f"image {k}: degenerate box")
        if n_classes is not None and a.size and (a[:, 4].min() < 0 or a[:, 4].max() >= n_classes):
            raise ArgumentError(f"image {k}: class id out of range [0, {n_classes})")
        out.append(a)
    return out


# -- head decoding -------------------------------------------------------------

def split_head(out: Tensor, n_classes: int):
    """``[N, K+5, G, G]`` -> class logits ``[N*G*G, K+1]`` and deltas ``[N*G*G, 4]``."""
    N, D, G, _ = out.shape
    if D != n_classes + 5:
        raise DimensionError(f"head emits {D} channels, expected {n_classes + 5}")
    flat = ops.reshape(ops.permute(out, (0, 2, 3, 1)), (N * G * G, D))
    return ops.columns(flat, 0, n_classes + 1), ops.columns(flat, n_classes + 1, D)


def _nms(dets: list) -> list:
    keep = []
    for d in sorted(dets, key=lambda b: -b.score):
        if all(k.cls != d.cls or iou(k, d) <= NMS_IOU for k in keep):
            keep.append(d)
    return keep


def decode_detections(out: np.ndarray, n_classes: int, image_size: int, image_offset: int = 0) -> List[List[Box]]:
    """Per-image detections (after per-class NMS) from raw head output."""
    N, D, G, _ = out.shape
    logits = out[:, :n_classes + 1].transpose(0, 2, 3, 1).astype(np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    boxes = decode_boxes(out[:, n_classes + 1:].transpose(0, 2, 3, 1), image_size, G)
    result = []
    for n in range(N):
        dets = []
        for gy in range(G):
            for gx in range(G):
                x0, y0, x1, y1 = boxes[n, gy, gx]
                if x1 <= x0 or y1 <= y0:
                    continue
                for k in range(1, n_classes + 1):
                    p = prob[n, gy, gx, k]
                    if p > SCORE_THRESHOLD:
                        dets.append(Box(x0, y0, x1, y1, k - 1, float(p), image_offset + n))
        result.append(_nms(dets))
    return result


def evaluate_map(forward, X, y, n_classes: int, batch_size: int = 256) -> float:
    """mAP@0.5 of ``forward`` (images -> head output array) on a dataset."""
    preds, gts = [], []
    for start in range(0, len(X), batch_size):
        with no_grad():
            out = forward(X[start:start + batch_size])
        for dets in decode_detections(out, n_classes, X.shape[2], start):
            preds.extend(dets)
    for k, ann in enumerate(y):
        for x0, y0, x1, y1, c in ann:
            gts.append(Box(float(x0), float(y0), float(x1), float(y1), int(c), image_id=k))
    return map_at_50(preds, gts).mAP


# -- training loop -------------------------------------------------------------

def train_loop(forward, groups, lrs, X, cls_t, box_t, n_classes, steps, batch_size, momentum,
               rng, loss_cfg: LossConfig, extra_losses=None, weight_decay=None, callback=None,
               optimizer="sgd", schedule="constant"):
    """Minibatch training on the detection loss plus optional penalty terms.

    ``forward(xb)`` returns the head output Tensor; ``extra_losses()`` returns
    ``(sparsity, adaptation)`` Tensors or ``None``. ``schedule`` is
    ``"constant"`` or ``"cosine"`` (decay to zero over ``steps``). Returns the
    loss history.
    """
    if schedule not in ("constant", "cosine"):
        raise ConfigurationError(f"unknown learning-rate schedule {schedule!r}")
    opt = make_optimizer(optimizer, groups, lrs, momentum, weight_decay)
    base_lrs = dict(opt.lrs)
    n = len(X)
    order = rng.permutation(n)
    pos = 0
    history = []
    for step in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        if schedule == "cosine":
            factor = 0.5 * (1 + np.cos(np.pi * step / steps))
            opt.lrs = {k: v * factor for k, v in base_lrs.items()}
        opt.zero_grad()
        out = forward(X[idx])
        logits, deltas = split_head(out, n_classes)
        det = detection_loss(logits, deltas, cls_t[idx].reshape(-1), box_t[idx].reshape(-1, 4),
                             loss_cfg.box_weight)
        if extra_losses is not None:
            sps, adp = extra_losses()
            loss = total_loss(det, sps, adp, loss_cfg)
        else:
            loss = det
        value = loss.item()
        if not np.isfinite(value):
            raise RunError(f"non-finite loss at step {step}", step=step)
        loss.backward()
        opt.step()
        history.append(value)
        if callback is not None:
            callback(step, value)
    return history


class GridDetector(BaseEstimator):
    """Source detector: conv/batch-norm backbone with a one-scale grid head."""

    def __init__(self, n_classes=3, widths=DEFAULT_WIDTHS, strides=DEFAULT_STRIDES, steps=3000,
                 batch_size=32, lr=0.05, momentum=0.9, weight_decay=1e-4, box_weight=1.0,
                 schedule="cosine", random_state=0):
        self.n_classes = n_classes
        self.schedule = schedule
        self.widths = widths
        self.strides = strides
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.box_weight = box_weight
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_annotations(y, len(X), self.n_classes)
        rng = np.random.default_rng(self.random_state)
        layers = detector_layers(X.shape[1], tuple(self.widths), tuple(self.strides), self.n_classes + 5)
        init = init_model(layers, rng)
        weights = {i: Tensor(w.copy(), requires_grad=True) for i, w in init.weights.items()}
        bn = {i: TaskBN.from_source(p) for i, p in init.bn.items()}

        def forward(xb, training=True):
            return run_layers(layers, xb, lambda i: weights[i],
                              lambda i: (bn[i].scale, bn[i].shift, bn[i].state, True), training)

        grid = forward(X[:1], training=False).shape[-1]
        cls_t, box_t = encode_targets(y, X.shape[2], grid)
        groups = {"weights": list(weights.values()),
                  "bn": [t for b in bn.values() for t in (b.scale, b.shift)]}
        self.history_ = train_loop(forward, groups, {"weights": self.lr, "bn": self.lr}, X, cls_t, box_t,
                                   self.n_classes, self.steps, self.batch_size, self.momentum, rng,
                                   LossConfig(0.0, 0.0, self.box_weight),
                                   weight_decay={"weights": self.weight_decay}, schedule=self.schedule)
        self.model_ = SourceModel(layers, {i: w.data for i, w in weights.items()},
                                  {i: b.to_params() for i, b in bn.items()},
                                  meta={"n_classes": self.n_classes, "image_size": int(X.shape[2]),
                                        "grid": int(grid)})
        self.grid_ = grid
        self.image_size_ = X.shape[2]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.layers[0].shape[1], self.image_size_)
        with no_grad():
            return forward_source(self.model_, X).data

    def predict(self, X) -> List[np.ndarray]:
        """Per-image arrays of rows ``(xmin, ymin, xmax, ymax, class, score)``."""
        out = self.decision_function(X)
        return [np.array([b.to_list() + [b.cls, b.score] for b in dets]).reshape(-1, 6)
                for dets in decode_detections(out, self.n_classes, self.image_size_)]

    def score(self, X, y) -> float:
        """mAP@0.5."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        y = check_annotations(y, len(X), self.n_classes)
        return evaluate_map(lambda xb: forward_source(self.model_, xb).data, X, y, self.n_classes)


class PatchedDetector(BaseEstimator):
    """Learns a task patch for a frozen :class:`SourceModel`.

    ``mode`` selects the patching scheme (see :class:`PatchMode`). Learning
    rates are set per parameter group; ``steps`` is the optimizer budget.
    ``momentum`` only applies to ``optimizer="sgd"``.
    After ``fit`` the deployed patch is in ``patch_`` (``None`` for
    fine-tuning, whose result is a full model in ``finetuned_``).
    """

    def __init__(self, source=None, mode="spotpatch", lambda_sps=1e-4, lambda_adp=2e-5,
                 box_weight=1.0, steps=300, batch_size=32, momentum=0.9, lr_masks=1e-3,
                 lr_gates=0.2, lr_scales=2e-4, lr_bn=1e-3, lr_weights=1e-4, mask_init_range=0.01,
                 scale_init=0.001, gate_init=0.5, optimizer="adam", random_state=0):
        self.source = source
        self.optimizer = optimizer
        self.mode = mode
        self.lambda_sps = lambda_sps
        self.lambda_adp = lambda_adp
        self.box_weight = box_weight
        self.steps = steps
        self.batch_size = batch_size
        self.momentum = momentum
        self.lr_masks = lr_masks
        self.lr_gates = lr_gates
        self.lr_scales = lr_scales
        self.lr_bn = lr_bn
        self.lr_weights = lr_weights
        self.mask_init_range = mask_init_range
        self.scale_init = scale_init
        self.gate_init = gate_init
        self.random_state = random_state

    def _source(self) -> SourceModel:
        if not isinstance(self.source, SourceModel):
            raise ConfigurationError("PatchedDetector needs a SourceModel as `source`")
        return self.source

    def fit(self, X, y):
        model = self._source()
        mode = PatchMode.parse(self.mode)
        n_classes = int(model.meta.get("n_classes", model.layers[-1].shape[0] - 5))
        X = check_images(X, model.layers[0].shape[1])
        y = check_annotations(y, len(X), n_classes)
        rng = np.random.default_rng(self.random_state)
        state = init_state(model, mode, rng, self.mask_init_range, self.scale_init, self.gate_init)
        loss_cfg = LossConfig(self.lambda_sps, self.lambda_adp, self.box_weight)

        def forward(xb):
            return forward_patched(model, state, mode, xb, training=True)

        def extra():
            gates = [ops.binarize_ste(f) for f in state.gate_logits.values()]
            return sparsity_loss(gates), adaptation_loss(list(state.scales.values()))

        with no_grad():
            grid = forward_source(model, X[:1]).shape[-1]
        cls_t, box_t = encode_targets(y, X.shape[2], grid)
        lrs = {"masks": self.lr_masks, "gates": self.lr_gates, "scales": self.lr_scales,
               "bn": self.lr_bn, "weights": self.lr_weights}
        self.gate_trace_ = []

        def record(step, value):
            if state.gate_logits:
                self.gate_trace_.append([int(v) for v in state.gate_values().values()])

        self.history_ = train_loop(forward, state.parameter_groups(), lrs, X, cls_t, box_t, n_classes,
                                   self.steps, self.batch_size, self.momentum, rng, loss_cfg,
                                   extra_losses=extra, callback=record, optimizer=self.optimizer)
        self.state_ = state
        self.mode_ = mode
        self.n_classes_ = n_classes
        self.image_size_ = X.shape[2]
        if mode is PatchMode.FINE_TUNE:
            self.patch_ = None
            self.finetuned_ = SourceModel(model.layers, {i: t.data.copy() for i, t in state.weights.items()},
                                          {i: b.to_params() for i, b in state.bn.items()}, model.meta)
        else:
            self.patch_ = deploy(model, state, mode)
            self.finetuned_ = None
        return self

    @property
    def gates_(self) -> List[int]:
        """Deployed gate bits per weight layer (all open for fine-tuning)."""
        check_is_fitted(self, "state_")
        if self.patch_ is None:
            return [1] * len(self._source().patchable_layers)
        return self.patch_.gates

    def footprint(self, mode="base32") -> FootprintReport:
        check_is_fitted(self, "state_")
        if self.patch_ is None:
            return finetune_footprint(self._source(), mode)
        return footprint(self.patch_, self._source(), mode)

    def _forward_eval(self, xb) -> np.ndarray:
        if self.patch_ is None:
            return forward_source(self.finetuned_, xb).data
        return forward_deployed(self._source(), self.patch_, xb).data

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = check_images(X, self._source().layers[0].shape[1], self.image_size_)
        with no_grad():
            return self._forward_eval(X)

    def predict(self, X) -> List[np.ndarray]:
        out = self.decision_function(X)
        return [np.array([b.to_list() + [b.cls, b.score] for b in dets]).reshape(-1, 6)
                for dets in decode_detections(out, self.n_classes_, self.image_size_)]

    def score(self, X, y) -> float:
        """mAP@0.5 of the deployed (binarized) patch."""
        check_is_fitted(self, "state_")
        X = check_images(X, self._source().layers[0].shape[1])
        y = check_annotations(y, len(X), self.n_classes_)
        return evaluate_map(self._forward_eval, X, y, self.n_classes_)
