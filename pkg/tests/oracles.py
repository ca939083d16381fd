"""Reference implementations used as test oracles.

They share no code with the package: plain loops, Python ints and
fractions, written for clarity rather than speed.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def conv2d_loops(x, w, stride=1, pad=0):
    """Direct six-loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    N, C, H, W = x.shape
    K, _, kh, kw = w.shape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, K, Ho, Wo))
    for n in range(N):
        for k in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[k, c, u, v]
                    out[n, k, i, j] = acc
    return out


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def raster_iou(a, b, cells_per_unit=64):
    """IoU by counting grid cell centers inside each box."""
    lo = min(a[0], b[0], a[1], b[1])
    hi = max(a[2], b[2], a[3], b[3])
    n = int(round((hi - lo) * cells_per_unit))
    centers = lo + (np.arange(n) + 0.5) / cells_per_unit
    yy, xx = np.meshgrid(centers, centers, indexing="ij")

    def inside(box):
        return (xx > box[0]) & (xx < box[2]) & (yy > box[1]) & (yy < box[3])

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(preds, gts, thr=0.5):
    """AP by re-scoring every prefix of the ranked predictions.

    ``preds`` are ``(box, score, image)`` tuples, ``gts`` ``(box, image)``.
    Each prefix is matched from scratch (highest-IoU unmatched gt on the
    same image, ties to the earlier gt), then precision at every recall
    level is replaced by the best precision at equal or higher recall.
    """
    if not gts:
        return 0.0
    ranked = sorted(range(len(preds)), key=lambda i: -preds[i][1])  # stable: ties keep input order
    points = []
    for k in range(1, len(ranked) + 1):
        used = set()
        tp = 0
        for i in ranked[:k]:
            box, _, img = preds[i]
            best, best_j = thr, None
            for j, (g, gimg) in enumerate(gts):
                if gimg != img or j in used:
                    continue
                v = _iou(box, g)
                if v >= best and (best_j is None or v > best):
                    best, best_j = v, j
            if best_j is not None:
                used.add(best_j)
                tp += 1
        points.append((tp / len(gts), tp / k))
    ap = 0.0
    prev_recall = 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_recall:
            ap += (r - prev_recall) * max(p for _, p in points[k:])
            prev_recall = r
    return ap


def pack_bits_lsb(bits):
    """LSB-first packing via Python integers."""
    bits = [int(b) for b in bits]
    out = bytearray()
    for start in range(0, len(bits), 8):
        byte = 0
        for k, b in enumerate(bits[start:start + 8]):
            byte |= b << k
        out.append(byte)
    return bytes(out)


def sigmoid_prime(r):
    s = 1.0 / (1.0 + math.exp(-r))
    return s * (1.0 - s)


def decathlon_score_exact(s, b):
    total = Fraction(0)
    for sd, bd in zip(s, b):
        sd, bd = Fraction(sd), Fraction(bd)
        gain = max(sd - bd, Fraction(0))
        total += (gain / (1 - bd)) ** 2
    return 10000 * total / len(s)


def count_params(layers):
    """Weight elements plus four values per batch-norm channel."""
    n = 0
    for spec in layers:
        if spec.kind == "batchnorm":
            n += 4 * spec.shape[0]
        else:
            n += int(np.prod(spec.shape))
    return n
