"""Decathlon-style benchmark scoring normalized against a fine-tuning baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import ArgumentError

MAX_SCORE = 10000.0


def baseline_from_finetune(ft_map: Sequence[float]) -> List[float]:
    """``b_d = 2 * mAP_d(fine-tune) - 1``, which puts the fine-tuning run at
    exactly a quarter of the maximum score. May be negative."""
    out = []
    for m in ft_map:
        m = float(m)
        if not 0.0 <= m <= 1.0:
            raise ArgumentError(f"mAP must lie in [0, 1], got {m}")
        out.append(2.0 * m - 1.0)
    return out


def score(s: Sequence[float], b: Sequence[float]) -> float:
    """``10000 / D * sum_d (max(s_d - b_d, 0) / (1 - b_d))**2``."""
    s = [float(v) for v in s]
    b = [float(v) for v in b]
    if len(s) != len(b):
        raise ArgumentError(f"{len(s)} scores but {len(b)} baselines")
    if not s:
        raise ArgumentError("score needs at least one task")
    total = 0.0
    for sd, bd in zip(s, b):
        if bd >= 1.0:
            raise ArgumentError(f"baseline {bd} >= 1 leaves no headroom to normalize by")
        gain = max(sd - bd, 0.0)
        total += (gain / (1.0 - bd)) ** 2
    return MAX_SCORE * total / len(s)


def score_per_footprint(score_value: float, footprint_value: float) -> float:
    if not footprint_value > 0:
        raise ArgumentError(f"footprint must be positive, got {footprint_value}")
    return float(score_value) / float(footprint_value)


@dataclass
class DecathlonResult:
    tasks: List[str]
    s: List[float]
    b: List[float]
    score: float
    footprint: float
    score_per_footprint: float
    D: int = field(init=False)

    def __post_init__(self):
        self.D = len(self.s)

    @classmethod
    def compute(cls, tasks, s, ft_map, footprint_total) -> "DecathlonResult":
        b = baseline_from_finetune(ft_map)
        sc = score(s, b)
        return cls(list(tasks), [float(v) for v in s], b, sc, float(footprint_total),
                   score_per_footprint(sc, footprint_total))

    def to_dict(self) -> dict:
        return {"tasks": self.tasks, "s": self.s, "b": self.b, "D": self.D, "score": self.score,
                "footprint": self.footprint, "score_per_footprint": self.score_per_footprint}
