"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation so the two backends
agree bit-exactly on integer outputs (sampling and query indices) and to
rounding on the rendered grids.
"""

import numpy as np

AGG_INTERPOLATION = 0
AGG_AVG_POOL = 1
AGG_NEAREST = 2

METRIC_CHEBYSHEV = 0
METRIC_EUCLIDEAN = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# regions processed per vectorized block; bounds temporaries to ~tens of MB
_QUERY_CHUNK = 64
_RENDER_CHUNK = 128


def _mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def hash3(seed, region, j):
    """Stateless 64-bit hash of (seed, region, j); the per-region random stream."""
    with np.errstate(over="ignore"):
        s = _mix(np.asarray(seed, dtype=np.uint64))
        r = _mix(s ^ np.asarray(region, dtype=np.uint64))
        return _mix(r ^ np.asarray(j, dtype=np.uint64))


def fps(coords, n_out, first):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    out = np.empty(n_out, dtype=np.int64)
    mind = np.full(n, np.inf)
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    cur = int(first)
    for s in range(n_out):
        out[s] = cur
        mind[cur] = -1.0
        dx = x - x[cur]
        dy = y - y[cur]
        dz = z - z[cur]
        d = dx * dx + dy * dy + dz * dz
        live = mind >= 0.0
        mind = np.where(live, np.minimum(mind, d), mind)
        cur = int(np.argmax(mind))
    return out


def query(coords, centroids, radius, k, seed, metric, offset=0):
    """Fixed-size neighbor sets around each centroid.

    Returns ``(idx, counts)``. A region without candidates gets count 0 and
    its slots hold the nearest point under the same metric. Region ``i``
    draws from the stream keyed by ``(seed, offset + i)``.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    n = coords.shape[0]
    m = centroids.shape[0]
    idx = np.empty((m, k), dtype=np.int64)
    counts = np.empty(m, dtype=np.int64)
    r2 = radius * radius
    for start in range(0, m, _QUERY_CHUNK):
        c = centroids[start:start + _QUERY_CHUNK]
        dx = coords[None, :, 0] - c[:, 0, None]
        dy = coords[None, :, 1] - c[:, 1, None]
        dz = coords[None, :, 2] - c[:, 2, None]
        if metric == METRIC_CHEBYSHEV:
            dist = np.maximum(np.maximum(np.abs(dx), np.abs(dy)), np.abs(dz))
            inside = dist <= radius
        else:
            dist = dx * dx + dy * dy + dz * dz
            inside = dist <= r2
        for row in range(c.shape[0]):
            i = start + row
            key = offset + i
            cand = np.flatnonzero(inside[row])
            if cand.size == 0:
                idx[i] = int(np.argmin(dist[row]))
                counts[i] = 0
                continue
            prio = hash3(seed, key, cand.astype(np.uint64))
            sel = cand[np.lexsort((cand, prio))[:k]]
            cnt = sel.size
            idx[i, :cnt] = sel
            if cnt < k:
                pad = hash3(seed, key, np.arange(n + cnt, n + k, dtype=np.uint64))
                idx[i, cnt:] = sel[(pad % np.uint64(cnt)).astype(np.int64)]
            counts[i] = cnt
    return idx, counts


def _weights(lc, vox, radius, power):
    diff = lc[:, :, None, :] - vox[None, None, :, :]
    d = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]
                + diff[..., 2] * diff[..., 2])
    w = np.maximum(0.0, 1.0 - (d / radius) ** power)
    return diff, d, w


def _aggregation_weights(d, w, agg):
    if agg == AGG_INTERPOLATION:
        return w
    support = w > 0
    if agg == AGG_AVG_POOL:
        return support.astype(w.dtype)
    dm = np.where(support, d, np.inf)
    nearest = np.argmin(dm, axis=1)  # first minimum -> lowest point index
    onehot = np.zeros_like(w)
    np.put_along_axis(onehot, nearest[:, None, :], 1.0, axis=1)
    return onehot * support.any(axis=1, keepdims=True)


def render_forward(local_coords, feats, voxels, radius, power, agg):
    dtype = feats.dtype
    m, k, c = feats.shape
    v = voxels.shape[0]
    values = np.zeros((m, v, c), dtype=dtype)
    wsum = np.zeros((m, v), dtype=dtype)
    lc_all = local_coords.astype(dtype, copy=False)
    vox = voxels.astype(dtype, copy=False)
    for start in range(0, m, _RENDER_CHUNK):
        sl = slice(start, start + _RENDER_CHUNK)
        _, d, w = _weights(lc_all[sl], vox, radius, power)
        wt = _aggregation_weights(d, w, agg)
        s = wt.sum(axis=1)
        num = np.einsum("mkv,mkc->mvc", wt, feats[sl])
        nz = s > 0
        safe = np.where(nz, s, 1.0)
        values[sl] = np.where(nz[..., None], num / safe[..., None], 0.0)
        wsum[sl] = s
    return values, wsum


def render_backward(local_coords, feats, voxels, radius, power, agg,
                    values, wsum, grad, need_coords):
    dtype = feats.dtype
    m, k, c = feats.shape
    gfeat = np.zeros((m, k, c), dtype=dtype)
    gcoord = np.zeros((m, k, 3), dtype=dtype)
    lc_all = local_coords.astype(dtype, copy=False)
    vox = voxels.astype(dtype, copy=False)
    for start in range(0, m, _RENDER_CHUNK):
        sl = slice(start, start + _RENDER_CHUNK)
        diff, d, w = _weights(lc_all[sl], vox, radius, power)
        wt = _aggregation_weights(d, w, agg)
        s = wsum[sl]
        nz = s > 0
        inv = np.where(nz, 1.0 / np.where(nz, s, 1.0), 0.0).astype(dtype)
        g = grad[sl]
        gfeat[sl] = np.einsum("mkv,mvc->mkc", wt * inv[:, None, :], g)
        if need_coords and agg == AGG_INTERPOLATION:
            gf = np.einsum("mvc,mkc->mkv", g, feats[sl])
            gi = np.einsum("mvc,mvc->mv", g, values[sl])
            dl_dw = (gf - gi[:, None, :]) * inv[:, None, :]
            active = (d > 0) & (d < radius)
            safe_d = np.where(active, d, 1.0)
            dw_dd = np.where(active, -power * safe_d ** (power - 1.0) / radius ** power, 0.0)
            coef = dl_dw * dw_dd / safe_d
            gcoord[sl] = np.einsum("mkv,mkvx->mkx", coef, diff)
    return gfeat, gcoord


def _patch_slices(x_shape, k, pad):
    d, h, w = x_shape[1:4]
    od, oh, ow = d + 2 * pad - k + 1, h + 2 * pad - k + 1, w + 2 * pad - k + 1
    for i in range(k):
        for j in range(k):
            for l in range(k):
                yield (slice(None), slice(i, i + od), slice(j, j + oh), slice(l, l + ow))


def im2col3d(x, k, pad, out):
    """Channels-last patch extraction into ``out`` ((B*D'*H'*W') x (k^3*C))."""
    c = x.shape[4]
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3 + ((0, 0),)) if pad else x
    view = out.reshape(-1, k ** 3, c)
    for o, sl in enumerate(_patch_slices(x.shape, k, pad)):
        view[:, o, :] = xp[sl].reshape(-1, c)


def col2im3d(cols, k, pad, dx):
    """Adjoint of :func:`im2col3d`: scatter-adds ``cols`` into ``dx``."""
    b, d, h, w, c = dx.shape
    dxp = np.zeros((b, d + 2 * pad, h + 2 * pad, w + 2 * pad, c), dtype=dx.dtype)
    view = cols.reshape(-1, k ** 3, c)
    for o, sl in enumerate(_patch_slices(dx.shape, k, pad)):
        dxp[sl] += view[:, o, :].reshape(dxp[sl].shape)
    dx += dxp[:, pad:pad + d, pad:pad + h, pad:pad + w]
