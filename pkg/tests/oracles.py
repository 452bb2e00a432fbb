"""Slow reference implementations used to check the vectorized code."""
import math

import numpy as np


def nms_scan(vals, threshold, radius):
    """Pixel-by-pixel local-maximum scan with rank (value desc, y asc, x asc)."""
    H, W = vals.shape
    out = []
    for y in range(H):
        for x in range(W):
            v = vals[y, x]
            if v < threshold:
                continue
            best = True
            for yy in range(max(0, y - radius), min(H, y + radius + 1)):
                for xx in range(max(0, x - radius), min(W, x + radius + 1)):
                    if (yy, xx) == (y, x):
                        continue
                    u = vals[yy, xx]
                    if u > v or (u == v and (yy, xx) < (y, x)):
                        best = False
                        break
                if not best:
                    break
            if best:
                out.append((v, y, x))
    out.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(x, y, v) for v, y, x in out]


def consistent_pairs(Y, B, tol):
    """Repeatedly take the globally closest unused (Y, B) pair within tol."""
    used_y, used_b = set(), set()
    while True:
        best = None
        for i, p in enumerate(Y):
            if i in used_y:
                continue
            for j, q in enumerate(B):
                if j in used_b:
                    continue
                d = math.hypot(p[0] - q[0], p[1] - q[1])
                if d > tol:
                    continue
                key = (d, i, q[0], q[1])
                if best is None or key < best[0]:
                    best = (key, i, j)
        if best is None:
            return sorted(used_y)
        used_y.add(best[1])
        used_b.add(best[2])


def apply_h(M, x, y):
    v = [M[0][0] * x + M[0][1] * y + M[0][2], M[1][0] * x + M[1][1] * y + M[1][2],
         M[2][0] * x + M[2][1] * y + M[2][2]]
    return v[0] / v[2], v[1] / v[2]


def info_nce_loop(b, bw, r, rw, t):
    """Double loop over anchors and negatives with explicit cosines."""
    def cos(u, v):
        return sum(a * c for a, c in zip(u, v)) / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(c * c for c in v)))
    total = 0.0
    for i in range(len(b)):
        pos = math.exp(cos(b[i], bw[i]) / t)
        den = 0.0
        for u in r:
            den += math.exp(cos(b[i], u) / t)
        for v in rw:
            den += math.exp(cos(b[i], v) / t)
        total += -math.log(pos / den)
    return total / len(b)


def auc_sweep(max_errors, threshold):
    """Success fraction summed threshold by threshold."""
    acc = 0.0
    for t in range(1, threshold + 1):
        acc += sum(1 for e in max_errors if e <= t) / len(max_errors)
    return acc / threshold


def nn_match_loop(da, db, ratio, mutual):
    out = []
    for i in range(len(da)):
        d = [float(np.linalg.norm(da[i] - db[j])) for j in range(len(db))]
        j = min(range(len(db)), key=lambda k: d[k])
        if ratio is not None and len(db) >= 2:
            second = sorted(d)[1]
            if not (second > 0 and d[j] / second < ratio):
                continue
        if mutual:
            back = [float(np.linalg.norm(da[k] - db[j])) for k in range(len(da))]
            if min(range(len(da)), key=lambda k: back[k]) != i:
                continue
        out.append((i, j, d[j]))
    return out
