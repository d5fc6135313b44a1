"""Brute-force reference implementations used by the tests.

Each function is written from the definition with plain loops and shares no
code with the package.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import torch


def dilate_naive(mask, size=40):
    """Minkowski sum with a size x size square whose offsets run -(size//2) .. size - size//2 - 1."""
    h, w = mask.shape
    lo = -(size // 2)
    offsets = range(lo, lo + size)
    out = np.zeros((h, w), dtype=bool)
    for y, x in zip(*np.nonzero(mask)):
        for dy in offsets:
            yy = y + dy
            if not 0 <= yy < h:
                continue
            for dx in offsets:
                xx = x + dx
                if 0 <= xx < w:
                    out[yy, xx] = True
    return out


def shadow_naive(obj, ground, light, length=0.5):
    """Per-pixel shear: ground pixel centre -> height above the ground line -> silhouette lookup."""
    h, w = obj.shape
    lx, ly = light
    out = np.zeros((h, w), dtype=bool)
    for r in range(ground, h):
        for c in range(w):
            depth = (r + 0.5) - ground
            height_above = depth / (length * ly)
            x = (c + 0.5) - height_above * length * lx
            y = ground - height_above
            sx, sy = math.floor(x), math.floor(y)
            if 0 <= sx < w and 0 <= sy < h and obj[sy, sx] and not obj[r, c]:
                out[r, c] = True
    return out


def reflection_naive(mask, nu=0.25):
    h, w = mask.shape
    widths = [int(mask[y].sum()) for y in range(h)]
    best = max(widths)
    y_w = max(y for y in range(h) if widths[y] == best)
    y_l = max(y for y in range(h) if widths[y] > 0)
    axis = y_w - nu * (y_l - y_w)
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                ry = math.floor(2 * axis - y + 0.5)
                if 0 <= ry < h:
                    out[ry, x] = True
    return out, axis


def mse_loop(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for i in range(a.size):
        total += (a[i] - b[i]) ** 2
    return total / a.size


def iou_loop(a, b):
    inter = union = 0
    for u, v in zip(np.asarray(a, bool).ravel().tolist(), np.asarray(b, bool).ravel().tolist()):
        inter += u and v
        union += u or v
    if union == 0:
        return 1.0
    return inter / union


def placement_loop(gt, preds):
    best = 0.0
    for p in preds:
        v = iou_loop(gt, p)
        if v > best:
            best = v
    return best, best > 0.5


def pooled_luma_loop(img, block=8):
    h, w = img.shape[:2]
    out = np.zeros((h // block, w // block))
    for by in range(h // block):
        for bx in range(w // block):
            s = 0.0
            for y in range(by * block, by * block + block):
                for x in range(bx * block, bx * block + block):
                    r, g, b = (float(v) for v in img[y, x, :3])
                    s += 0.299 * r + 0.587 * g + 0.114 * b
            out[by, bx] = s / (block * block)
    return out


def diversity_loop(images):
    pooled = [pooled_luma_loop(np.asarray(im, dtype=np.float64)) for im in images]
    total, count = 0.0, 0
    for i in range(len(pooled)):
        for j in range(i + 1, len(pooled)):
            total += float(np.abs(pooled[i] - pooled[j]).sum()) / pooled[i].size
            count += 1
    return total / count


def aggregate_rows(rows):
    """Recompute report aggregates from per-image dicts."""
    n = len(rows)
    mean_iou = sum(r["max_iou"] for r in rows) / n
    rate = sum(1 for r in rows if r["hit"]) / n
    div = sum(r["diversity"] for r in rows) / n
    ident = [r["identity"] for r in rows if r["identity"] is not None]
    return {
        "mean_iou": mean_iou,
        "iou_over_half_rate": rate,
        "pairwise_diversity": div,
        "identity_proxy": (sum(ident) / len(ident)) if ident else None,
    }


def merge_fraction(a: float, b: float, alpha: float) -> Fraction:
    return Fraction(alpha) * Fraction(float(a)) + (1 - Fraction(alpha)) * Fraction(float(b))


def finite_difference_grads(loss_fn, params, h=1e-6):
    """Central differences of ``loss_fn()`` with respect to every element of ``params``.

    ``loss_fn`` may return a scalar or a 1-D tensor of k losses; gradients then carry a leading k axis.
    """
    grads = []
    with torch.no_grad():
        k = torch.as_tensor(loss_fn()).numel()
        for p in params:
            g = torch.zeros((k,) + tuple(p.shape), dtype=torch.float64)
            flat, gflat = p.view(-1), g.view(k, -1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = torch.as_tensor(loss_fn(), dtype=torch.float64).reshape(k)
                flat[i] = orig - h
                down = torch.as_tensor(loss_fn(), dtype=torch.float64).reshape(k)
                flat[i] = orig
                gflat[:, i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float((a - b).norm())
    den = max(float(a.norm()), float(b.norm()))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den
