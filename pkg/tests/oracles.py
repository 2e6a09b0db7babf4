"""Slow, literal reference implementations used to check the fast paths."""

from __future__ import annotations

import math


def naive_ncc(ref, query, search_range):
    """Direct double loop over the overlap for every offset.

    Reference mean over the overlapped columns, query mean over the whole
    image; an offset scores 0 if either side has (near) zero variance.
    """
    h, w = len(ref), len(ref[0])
    qmean = sum(query[y][x] for y in range(h) for x in range(w)) / (h * w)
    out = []
    for d in range(-search_range, search_range + 1):
        xs = [x for x in range(w) if 0 <= x + d < w]
        r = [ref[y][x] for y in range(h) for x in xs]
        q = [query[y][x + d] for y in range(h) for x in xs]
        rmean = sum(r) / len(r)
        num = sum((a - rmean) * (b - qmean) for a, b in zip(r, q))
        vr = sum((a - rmean) ** 2 for a in r)
        vq = sum((b - qmean) ** 2 for b in q)
        out.append(0.0 if vr < 1e-12 or vq < 1e-12 else num / math.sqrt(vr * vq))
    return out


def naive_block_normalise(img, size):
    h, w = len(img), len(img[0])
    out = [[0.0] * w for _ in range(h)]
    for by in range(0, h, size):
        for bx in range(0, w, size):
            cells = [(y, x) for y in range(by, min(h, by + size)) for x in range(bx, min(w, bx + size))]
            vals = [img[y][x] for y, x in cells]
            m = sum(vals) / len(vals)
            sd = math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))
            for y, x in cells:
                out[y][x] = 0.0 if sd < 1e-6 else (img[y][x] - m) / sd
    return out
