"""Independent brute-force reference implementations used as test oracles.

Nothing here calls into the package's kernels; the loops are deliberately
naive so they can be checked by reading.
"""

import math

import numpy as np


def sqdist(a, b):
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    dz = a[2] - b[2]
    return dx * dx + dy * dy + dz * dz


def fps_oracle(coords, n_out, first):
    """Greedy max-min selection, scanning every candidate at every step."""
    n = len(coords)
    chosen = [first]
    while len(chosen) < n_out:
        best, best_d = None, -1.0
        for j in range(n):
            if j in chosen:
                continue
            d = min(sqdist(coords[j], coords[s]) for s in chosen)
            if d > best_d:
                best, best_d = j, d
        chosen.append(best)
    return chosen


def cube_members(coords, centroid, half_edge):
    return [j for j, p in enumerate(coords)
            if max(abs(p[0] - centroid[0]), abs(p[1] - centroid[1]), abs(p[2] - centroid[2]))
            <= half_edge]


def ball_members(coords, centroid, radius):
    return [j for j, p in enumerate(coords) if sqdist(p, centroid) <= radius * radius]


def voxel_centers(w, h, l):
    out = []
    for i in range(w):
        for j in range(h):
            for k in range(l):
                out.append((-1 + 2 * i / (w - 1), -1 + 2 * j / (h - 1), -1 + 2 * k / (l - 1)))
    return out


def render_oracle(local_coords, local_feats, res, r, p, aggregation="interpolation"):
    """Per-point grayscale grids F_i(v) = k(d(theta_i, v)), then the weighted average."""
    w, h, l = res
    vox = voxel_centers(w, h, l)
    m, k, c = np.shape(local_feats)
    out = np.zeros((m, w * h * l, c))
    for a in range(m):
        for vi, v in enumerate(vox):
            grays = []
            dists = []
            for i in range(k):
                d = math.sqrt(sqdist(local_coords[a][i], v))
                grays.append(max(0.0, 1.0 - (d / r) ** p))
                dists.append(d)
            support = [i for i in range(k) if grays[i] > 0]
            if not support:
                continue
            for ch in range(c):
                if aggregation == "interpolation":
                    num = sum(grays[i] * local_feats[a][i][ch] for i in support)
                    out[a, vi, ch] = num / sum(grays[i] for i in support)
                elif aggregation == "avg_pool":
                    out[a, vi, ch] = sum(local_feats[a][i][ch] for i in support) / len(support)
                else:
                    near = min(support, key=lambda i: (dists[i], i))
                    out[a, vi, ch] = local_feats[a][near][ch]
    return out.reshape((m, w, h, l, c))


def conv3d_oracle(x, weight, bias, padding):
    b, cin, d, h, w = x.shape
    cout, _, k, _, _ = weight.shape
    od, oh, ow = d + 2 * padding - k + 1, h + 2 * padding - k + 1, w + 2 * padding - k + 1
    out = np.zeros((b, cout, od, oh, ow))
    for n in range(b):
        for co in range(cout):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        acc = bias[co] if bias is not None else 0.0
                        for ci in range(cin):
                            for i in range(k):
                                for j in range(k):
                                    for q in range(k):
                                        zz, yy, x3 = z + i - padding, y + j - padding, xx + q - padding
                                        if 0 <= zz < d and 0 <= yy < h and 0 <= x3 < w:
                                            acc += weight[co, ci, i, j, q] * x[n, ci, zz, yy, x3]
                        out[n, co, z, y, xx] = acc
    return out


def knn3_idw_oracle(src_coords, src_feats, dst_coords, eps=1e-8):
    out = []
    for q in dst_coords:
        d = sorted((math.sqrt(sqdist(q, s)), j) for j, s in enumerate(src_coords))[:3]
        ws = [1.0 / max(dj, eps) for dj, _ in d]
        tot = sum(ws)
        out.append([sum(wj * src_feats[j][c] for wj, (_, j) in zip(ws, d)) / tot
                    for c in range(len(src_feats[0]))])
    return np.array(out)


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def average_precision_oracle(scores, tp, n_gt):
    """All-point interpolated AP from a scored TP/FP list, computed by hand."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tps = fps_ = 0
    prec, rec = [], []
    for i in order:
        if tp[i]:
            tps += 1
        else:
            fps_ += 1
        prec.append(tps / (tps + fps_))
        rec.append(tps / n_gt)
    ap = 0.0
    prev_r = 0.0
    for i in range(len(rec)):
        if rec[i] > prev_r:
            ap += (rec[i] - prev_r) * max(prec[i:])
            prev_r = rec[i]
    return ap


def iou_oracle(a, b):
    """Axis-aligned IoU from per-axis overlap lengths."""
    inter = 1.0
    for ax in range(3):
        lo = max(a[ax] - a[3 + ax] / 2, b[ax] - b[3 + ax] / 2)
        hi = min(a[ax] + a[3 + ax] / 2, b[ax] + b[3 + ax] / 2)
        inter *= max(0.0, hi - lo)
    va = a[3] * a[4] * a[5]
    vb = b[3] * b[4] * b[5]
    return inter / (va + vb - inter)


def nms_oracle(boxes, scores, labels, thresh):
    """Repeatedly keep the best remaining box and strike its same-class overlaps."""
    remaining = list(range(len(scores)))
    kept = []
    while remaining:
        best = min(remaining, key=lambda i: (-scores[i], i))
        kept.append(best)
        remaining = [i for i in remaining if i != best and not (
            labels[i] == labels[best] and iou_oracle(boxes[i], boxes[best]) > thresh)]
    return kept
