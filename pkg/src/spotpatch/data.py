"""Synthetic shape-detection tasks and grid-anchor target encoding.

Every task draws images of colored superellipses on a noisy background.
Class identity is carried by shape (superellipse exponent and aspect ratio)
and color. A task's distribution is the source distribution moved a
fraction ``delta`` of the way towards a variant drawn from ``variant_seed``:
``delta = 0`` is the source task itself and ``delta = 1`` a task whose class
cues are reassigned, colors and background changed.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .evalmetrics import Box
from .exceptions import ArgumentError

_SOURCE_COLORS = np.array([[0.90, 0.20, 0.20], [0.20, 0.85, 0.25], [0.25, 0.35, 0.95],
                           [0.90, 0.85, 0.20], [0.80, 0.30, 0.85], [0.20, 0.85, 0.85]])
_SOURCE_EXPONENTS = np.array([8.0, 2.0, 1.0, 8.0, 2.0, 1.0])
_SOURCE_ASPECTS = np.array([1.0, 1.0, 1.0, 0.55, 0.55, 0.55])


@dataclass(frozen=True)
class SyntheticTaskSpec:
    name: str = "source"
    seed: int = 0
    delta: float = 0.0
    variant_seed: int = 0
    image_size: int = 32
    channels: int = 3
    n_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    n_train: int = 512
    n_eval: int = 128

    def __post_init__(self):
        if self.n_classes < 1:
            raise ArgumentError("a task needs at least one class")
        if self.n_classes > len(_SOURCE_COLORS):
            raise ArgumentError(f"at most {len(_SOURCE_COLORS)} classes supported")
        if not 0.0 <= self.delta <= 1.0:
            raise ArgumentError(f"delta must lie in [0, 1], got {self.delta}")
        if self.channels not in (1, 3):
            raise ArgumentError("channels must be 1 or 3")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ArgumentError("need 0 <= min_objects <= max_objects")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


@dataclass(frozen=True)
class DistributionParams:
    colors: np.ndarray       # (K, 3) per-class RGB
    exponents: np.ndarray    # (K,) superellipse exponent per class
    aspects: np.ndarray      # (K,) height/width ratio per class
    background: np.ndarray   # (3,) background RGB
    size_range: Tuple[float, float]
    noise: float

    def __eq__(self, other):
        return (isinstance(other, DistributionParams)
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("colors", "exponents", "aspects", "background"))
                and tuple(self.size_range) == tuple(other.size_range) and self.noise == other.noise)


def source_params(n_classes: int) -> DistributionParams:
    return DistributionParams(
        colors=_SOURCE_COLORS[:n_classes].copy(),
        exponents=_SOURCE_EXPONENTS[:n_classes].copy(),
        aspects=_SOURCE_ASPECTS[:n_classes].copy(),
        background=np.array([0.15, 0.15, 0.15]),
        size_range=(7.0, 13.0),
        noise=0.05,
    )


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 1:
        return np.zeros(1, dtype=int)
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def variant_params(n_classes: int, variant_seed: int) -> DistributionParams:
    """The far end (delta = 1) of the task family for ``variant_seed``."""
    rng = np.random.default_rng([variant_seed, 7919])
    src = source_params(n_classes)
    shape_perm = _derangement(n_classes, rng)
    color_perm = _derangement(n_classes, rng)
    colors = np.clip(src.colors[color_perm] + rng.uniform(-0.1, 0.1, size=(n_classes, 3)), 0, 1)
    return DistributionParams(
        colors=colors,
        exponents=src.exponents[shape_perm],
        aspects=np.clip(src.aspects[shape_perm] * rng.uniform(0.6, 0.8, size=n_classes), 0.35, 1.0),
        background=rng.uniform(0.45, 0.65, size=3),
        size_range=(6.0, 11.0),
        noise=0.08,
    )


def distribution_params(spec: SyntheticTaskSpec) -> DistributionParams:
    src = source_params(spec.n_classes)
    if spec.delta == 0:
        return src
    var = variant_params(spec.n_classes, spec.variant_seed)
    d = spec.delta

    def lerp(a, b):
        return np.asarray(a) + d * (np.asarray(b) - np.asarray(a))

    return DistributionParams(
        colors=lerp(src.colors, var.colors),
        exponents=np.exp(lerp(np.log(src.exponents), np.log(var.exponents))),
        aspects=lerp(src.aspects, var.aspects),
        background=lerp(src.background, var.background),
        size_range=tuple(float(v) for v in lerp(src.size_range, var.size_range)),
        noise=float(lerp(src.noise, var.noise)),
    )


@dataclass
class Dataset:
    """Images ``[N, C, H, W]`` in [0, 1] and per-image annotation arrays
    ``[n_i, 5]`` with rows ``(xmin, ymin, xmax, ymax, class)``."""

    images: np.ndarray
    annotations: List[np.ndarray]
    spec: Optional[SyntheticTaskSpec] = None

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], [self.annotations[i] for i in idx], self.spec)

    def gt_boxes(self) -> List[Box]:
        out = []
        for k, ann in enumerate(self.annotations):
            for x0, y0, x1, y1, c in ann:
                out.append(Box(float(x0), float(y0), float(x1), float(y1), int(c), image_id=k))
        return out

    def to_bytes(self) -> bytes:
        h = bytearray(self.images.astype("<f4").tobytes())
        for a in self.annotations:
            h += np.asarray(a, dtype="<f8").tobytes() + b"|"
        return bytes(h)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        counts = np.array([len(a) for a in self.annotations], dtype=np.int64)
        flat = np.concatenate(self.annotations) if counts.sum() else np.zeros((0, 5))
        with open(path, "wb") as fh:
            np.savez(fh, images=self.images, counts=counts, boxes=flat)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            counts, flat = z["counts"], z["boxes"]
            splits = np.split(flat, np.cumsum(counts)[:-1]) if len(counts) else []
            return cls(z["images"].copy(), [s.copy() for s in splits])


def _render(rng: np.random.Generator, params: DistributionParams, spec: SyntheticTaskSpec, grid: int):
    S = spec.image_size
    cell = S / grid
    img = np.empty((3, S, S))
    img[:] = params.background[:, None, None]
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    n = min(n, grid * grid)
    cells = rng.choice(grid * grid, size=n, replace=False)
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    boxes = []
    for c in cells:
        cls = int(rng.integers(spec.n_classes))
        size = rng.uniform(*params.size_range)
        a = min(size / 2, cell - 0.5)
        b = a * params.aspects[cls]
        if rng.random() < 0.5:
            a, b = b, a
        gy, gx = divmod(int(c), grid)
        lo_x, hi_x = max(gx * cell, a), min((gx + 1) * cell, S - a)
        lo_y, hi_y = max(gy * cell, b), min((gy + 1) * cell, S - b)
        cx = rng.uniform(lo_x, hi_x - 1e-6)
        cy = rng.uniform(lo_y, hi_y - 1e-6)
        p = params.exponents[cls]
        inside = np.abs((xx - cx) / a) ** p + np.abs((yy - cy) / b) ** p <= 1.0
        img[:, inside] = params.colors[cls][:, None]
        boxes.append((cx - a, cy - b, cx + a, cy + b, cls))
    img += rng.normal(0.0, params.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    if spec.channels == 1:
        img = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    return img.astype(np.float32), np.array(boxes, dtype=np.float64).reshape(-1, 5)


def gen_task(spec: SyntheticTaskSpec, grid: int = 4, split: str = "train") -> Dataset:
    """Deterministic dataset for ``spec``; ``split`` is ``"train"`` or ``"eval"``."""
    if split not in ("train", "eval"):
        raise ArgumentError(f"unknown split {split!r}")
    params = distribution_params(spec)
    n = spec.n_train if split == "train" else spec.n_eval
    rng = np.random.default_rng([spec.seed, 0 if split == "train" else 1])
    imgs, anns = [], []
    for _ in range(n):
        im, bx = _render(rng, params, spec, grid)
        imgs.append(im)
        anns.append(bx)
    images = np.stack(imgs) if imgs else np.zeros((0, spec.channels, spec.image_size, spec.image_size), np.float32)
    return Dataset(images, anns, spec)


# -- grid-anchor encoding ------------------------------------------------------

ANCHOR_SCALE = 1.25


def encode_targets(annotations: List[np.ndarray], image_size: int, grid: int):
    """Per-cell class targets ``[N, G, G]`` (0 = background, class+1 otherwise)
    and box deltas ``[N, G, G, 4]`` relative to the cell's anchor."""
    N = len(annotations)
    cell = image_size / grid
    anchor = cell * ANCHOR_SCALE
    cls = np.zeros((N, grid, grid), dtype=np.int64)
    box = np.zeros((N, grid, grid, 4), dtype=np.float32)
    for n, ann in enumerate(annotations):
        for x0, y0, x1, y1, c in ann:
            cx, cy, w, h = (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0
            gx = min(int(cx // cell), grid - 1)
            gy = min(int(cy // cell), grid - 1)
            cls[n, gy, gx] = int(c) + 1
            box[n, gy, gx] = ((cx - (gx + 0.5) * cell) / cell, (cy - (gy + 0.5) * cell) / cell,
                              np.log(w / anchor), np.log(h / anchor))
    return cls, box


def decode_boxes(deltas: np.ndarray, image_size: int, grid: int) -> np.ndarray:
    """Inverse of :func:`encode_targets` for deltas ``[N, G, G, 4]``; returns
    ``[N, G, G, 4]`` corner boxes clipped to the image."""
    cell = image_size / grid
    anchor = cell * ANCHOR_SCALE
    gy, gx = np.mgrid[0:grid, 0:grid]
    d = deltas.astype(np.float64)
    cx = (gx + 0.5) * cell + d[..., 0] * cell
    cy = (gy + 0.5) * cell + d[..., 1] * cell
    w = anchor * np.exp(np.clip(d[..., 2], -4, 4))
    h = anchor * np.exp(np.clip(d[..., 3], -4, 4))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return np.clip(out, 0.0, float(image_size))
