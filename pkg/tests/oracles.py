"""Independent reference implementations used as test oracles.

Written as plain Python loops over floats so they share no code path with
the vectorised library functions they check.
"""

import math

import numpy as np


def weights_loop(sigmas, deltas):
    out = []
    for i in range(len(sigmas)):
        acc = 0.0
        for j in range(i):
            acc += deltas[j] * sigmas[j]
        out.append(math.exp(-acc) * (1.0 - math.exp(-deltas[i] * sigmas[i])))
    return out


def composite_loop(weights, values):
    dim = len(values[0])
    return [sum(weights[i] * values[i][k] for i in range(len(weights))) for k in range(dim)]


def softmax_loop(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def central_difference(f, x: np.ndarray, idx, step=1e-4):
    """d f / d x[idx] by central differences on a float64 copy."""
    xp = x.copy()
    xm = x.copy()
    xp[idx] += step
    xm[idx] -= step
    return (f(xp) - f(xm)) / (2 * step)


def centroids_loop(features_per_view, labels_per_view, class_count, ignore=255):
    """Per-class mean by explicit accumulation over every pixel."""
    dim = features_per_view[0].shape[-1]
    sums = [[0.0] * dim for _ in range(class_count)]
    counts = [0] * class_count
    for feats, labels in zip(features_per_view, labels_per_view):
        h, w = labels.shape
        for r in range(h):
            for c in range(w):
                lab = int(labels[r, c])
                if lab == ignore:
                    continue
                counts[lab] += 1
                for k in range(dim):
                    sums[lab][k] += float(feats[r, c, k])
    cents = [[s / counts[c] for s in sums[c]] if counts[c] else None for c in range(class_count)]
    return cents, counts


def nearest_centroid_loop(feature, centroids):
    """Index of the nearest valid centroid (first on ties) and the distance table."""
    table = []
    for c in centroids:
        if c is None:
            table.append(math.inf)
        else:
            table.append(math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(feature, c))))
    best = 0
    for k in range(1, len(table)):
        if table[k] < table[best]:
            best = k
    return best, table


def bilinear_loop(grid, x, y, height, width):
    """Bilinear read with half-cell-centre alignment and border clamping."""
    hf, wf = grid.shape[:2]
    gu = min(max(x * wf / width - 0.5, 0.0), wf - 1)
    gv = min(max(y * hf / height - 0.5, 0.0), hf - 1)
    u0, v0 = int(math.floor(gu)), int(math.floor(gv))
    u1, v1 = min(u0 + 1, wf - 1), min(v0 + 1, hf - 1)
    a, b = gu - u0, gv - v0
    return (
        grid[v0, u0] * (1 - a) * (1 - b)
        + grid[v0, u1] * a * (1 - b)
        + grid[v1, u0] * (1 - a) * b
        + grid[v1, u1] * a * b
    )


def confusion_loop(gt, pred, class_count, ignore=255):
    m = [[0] * class_count for _ in range(class_count)]
    for g, p in zip(np.ravel(gt), np.ravel(pred)):
        if g == ignore:
            continue
        m[int(g)][int(p)] += 1
    return np.array(m)


def first_hit_loop(primitives, origin, direction):
    """Class of the nearest primitive along a ray, scalar math only (-1 on miss)."""
    from mvseg.synthetic_scenes import PLANE_THICKNESS

    best_t, best_cls = math.inf, -1
    for p in primitives:
        if p.shape == "sphere":
            oc = [origin[k] - p.position[k] for k in range(3)]
            b = sum(oc[k] * direction[k] for k in range(3))
            c = sum(v * v for v in oc) - float(p.size) ** 2
            disc = b * b - c
            if disc < 0:
                continue
            r = math.sqrt(disc)
            t = -b - r if -b - r >= 0 else -b + r
            if t < 0:
                continue
        else:
            if p.shape == "box":
                half = p.size if isinstance(p.size, tuple) else (p.size,) * 3
                lo = [p.position[k] - half[k] for k in range(3)]
                hi = [p.position[k] + half[k] for k in range(3)]
            else:
                s = float(p.size)
                lo = [p.position[0] - s, p.position[1] - s, p.position[2] - PLANE_THICKNESS]
                hi = [p.position[0] + s, p.position[1] + s, p.position[2]]
            tmin, tmax = -math.inf, math.inf
            ok = True
            for k in range(3):
                if direction[k] == 0:
                    if not lo[k] <= origin[k] <= hi[k]:
                        ok = False
                    continue
                t1 = (lo[k] - origin[k]) / direction[k]
                t2 = (hi[k] - origin[k]) / direction[k]
                tmin = max(tmin, min(t1, t2))
                tmax = min(tmax, max(t1, t2))
            if not ok or tmax < tmin:
                continue
            t = tmin if tmin >= 0 else tmax
            if t < 0:
                continue
        if t < best_t:
            best_t, best_cls = t, p.class_index
    return best_cls
