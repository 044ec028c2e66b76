# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: farthest point sampling, neighborhood query and the
local grid renderer (forward and backward).

Semantics match ``_pykernels`` exactly; see that module for the reference.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, pow, fabs, INFINITY
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free, qsort
from libc.string cimport memcpy, memset

cnp.import_array()

cdef enum:
    AGG_INTERPOLATION = 0
    AGG_AVG_POOL = 1
    AGG_NEAREST = 2


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = z + 0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t _hash3(uint64_t seed, uint64_t region, uint64_t j) nogil:
    return _mix(_mix(_mix(seed) ^ region) ^ j)


ctypedef struct _Cand:
    uint64_t prio
    int64_t index


cdef int _cmp_cand(const void* a, const void* b) noexcept nogil:
    cdef const _Cand* x = <const _Cand*> a
    cdef const _Cand* y = <const _Cand*> b
    if x.prio < y.prio:
        return -1
    if x.prio > y.prio:
        return 1
    if x.index < y.index:
        return -1
    if x.index > y.index:
        return 1
    return 0


def hash3(uint64_t seed, uint64_t region, uint64_t j):
    return _hash3(seed, region, j)


def fps(double[:, ::1] coords, Py_ssize_t n_out, Py_ssize_t first):
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t s, i, cur = first, best
    cdef double dx, dy, dz, d, bestd
    out = np.empty(n_out, dtype=np.int64)
    cdef int64_t[::1] o = out
    mind_arr = np.full(n, INFINITY)
    cdef double[::1] mind = mind_arr
    with nogil:
        for s in range(n_out):
            o[s] = cur
            mind[cur] = -1.0
            best = 0
            bestd = -INFINITY
            for i in range(n):
                if mind[i] >= 0.0:
                    dx = coords[i, 0] - coords[cur, 0]
                    dy = coords[i, 1] - coords[cur, 1]
                    dz = coords[i, 2] - coords[cur, 2]
                    d = dx * dx + dy * dy + dz * dz
                    if d < mind[i]:
                        mind[i] = d
                if mind[i] > bestd:
                    bestd = mind[i]
                    best = i
            cur = best
    return out


def query(double[:, ::1] coords, double[:, ::1] centroids, double radius,
          Py_ssize_t k, uint64_t seed, int metric, Py_ssize_t offset=0):
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t m = centroids.shape[0]
    cdef Py_ssize_t i, j, s, cnt, nearest
    cdef double dx, dy, dz, d, r2 = radius * radius, bestd
    cdef bint inside
    idx_arr = np.empty((m, k), dtype=np.int64)
    counts_arr = np.empty(m, dtype=np.int64)
    cdef int64_t[:, ::1] idx = idx_arr
    cdef int64_t[::1] counts = counts_arr
    cdef _Cand* buf = <_Cand*> malloc(max(n, 1) * sizeof(_Cand))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(m):
                cnt = 0
                nearest = 0
                bestd = INFINITY
                for j in range(n):
                    dx = coords[j, 0] - centroids[i, 0]
                    dy = coords[j, 1] - centroids[i, 1]
                    dz = coords[j, 2] - centroids[i, 2]
                    if metric == 0:
                        d = fabs(dx)
                        if fabs(dy) > d:
                            d = fabs(dy)
                        if fabs(dz) > d:
                            d = fabs(dz)
                        inside = d <= radius
                    else:
                        d = dx * dx + dy * dy + dz * dz
                        inside = d <= r2
                    if d < bestd:
                        bestd = d
                        nearest = j
                    if inside:
                        buf[cnt].prio = _hash3(seed, <uint64_t> (offset + i), <uint64_t> j)
                        buf[cnt].index = j
                        cnt += 1
                if cnt == 0:
                    for s in range(k):
                        idx[i, s] = nearest
                    counts[i] = 0
                    continue
                qsort(buf, cnt, sizeof(_Cand), _cmp_cand)
                if cnt > k:
                    cnt = k
                for s in range(cnt):
                    idx[i, s] = buf[s].index
                for s in range(cnt, k):
                    idx[i, s] = buf[_hash3(seed, <uint64_t> (offset + i), <uint64_t> (n + s)) % <uint64_t> cnt].index
                counts[i] = cnt
    finally:
        free(buf)
    return idx_arr, counts_arr


cdef inline floating _kernel(floating d, floating radius, floating power) nogil:
    cdef floating t
    if d >= radius:
        return 0
    t = 1 - <floating> pow(d / radius, power)
    return t if t > 0 else 0


def render_forward(floating[:, :, ::1] local_coords, floating[:, :, ::1] feats,
                   floating[:, ::1] voxels, double radius, double power, int agg):
    cdef Py_ssize_t m = feats.shape[0], k = feats.shape[1], c = feats.shape[2]
    cdef Py_ssize_t nv = voxels.shape[0]
    cdef Py_ssize_t a, i, v, ch, best
    cdef floating dx, dy, dz, d, w, s, bestd
    cdef floating r = <floating> radius, p = <floating> power
    dtype = np.float64 if floating is double else np.float32
    values_arr = np.zeros((m, nv, c), dtype=dtype)
    wsum_arr = np.zeros((m, nv), dtype=dtype)
    cdef floating[:, :, ::1] values = values_arr
    cdef floating[:, ::1] wsum = wsum_arr
    with nogil:
        for a in range(m):
            for v in range(nv):
                s = 0
                best = -1
                bestd = INFINITY
                for i in range(k):
                    dx = local_coords[a, i, 0] - voxels[v, 0]
                    dy = local_coords[a, i, 1] - voxels[v, 1]
                    dz = local_coords[a, i, 2] - voxels[v, 2]
                    d = sqrt(dx * dx + dy * dy + dz * dz)
                    w = _kernel(d, r, p)
                    if w <= 0:
                        continue
                    if agg == AGG_NEAREST:
                        if d < bestd:
                            bestd = d
                            best = i
                        continue
                    if agg == AGG_AVG_POOL:
                        w = 1
                    s = s + w
                    for ch in range(c):
                        values[a, v, ch] += w * feats[a, i, ch]
                if agg == AGG_NEAREST:
                    if best >= 0:
                        s = 1
                        for ch in range(c):
                            values[a, v, ch] = feats[a, best, ch]
                elif s > 0:
                    for ch in range(c):
                        values[a, v, ch] = values[a, v, ch] / s
                wsum[a, v] = s
    return values_arr, wsum_arr


def render_backward(floating[:, :, ::1] local_coords, floating[:, :, ::1] feats,
                    floating[:, ::1] voxels, double radius, double power, int agg,
                    floating[:, :, ::1] values, floating[:, ::1] wsum,
                    floating[:, :, ::1] grad, bint need_coords):
    cdef Py_ssize_t m = feats.shape[0], k = feats.shape[1], c = feats.shape[2]
    cdef Py_ssize_t nv = voxels.shape[0]
    cdef Py_ssize_t a, i, v, ch, best
    cdef floating dx, dy, dz, d, w, inv, dl_dw, dw_dd, gi, bestd
    cdef floating r = <floating> radius, p = <floating> power
    dtype = np.float64 if floating is double else np.float32
    gfeat_arr = np.zeros((m, k, c), dtype=dtype)
    gcoord_arr = np.zeros((m, k, 3), dtype=dtype)
    cdef floating[:, :, ::1] gfeat = gfeat_arr
    cdef floating[:, :, ::1] gcoord = gcoord_arr
    with nogil:
        for a in range(m):
            for v in range(nv):
                if wsum[a, v] <= 0:
                    continue
                inv = 1 / wsum[a, v]
                if agg == AGG_NEAREST:
                    best = -1
                    bestd = INFINITY
                    for i in range(k):
                        dx = local_coords[a, i, 0] - voxels[v, 0]
                        dy = local_coords[a, i, 1] - voxels[v, 1]
                        dz = local_coords[a, i, 2] - voxels[v, 2]
                        d = sqrt(dx * dx + dy * dy + dz * dz)
                        if _kernel(d, r, p) > 0 and d < bestd:
                            bestd = d
                            best = i
                    if best >= 0:
                        for ch in range(c):
                            gfeat[a, best, ch] += grad[a, v, ch]
                    continue
                gi = 0
                if need_coords and agg == AGG_INTERPOLATION:
                    for ch in range(c):
                        gi = gi + grad[a, v, ch] * values[a, v, ch]
                for i in range(k):
                    dx = local_coords[a, i, 0] - voxels[v, 0]
                    dy = local_coords[a, i, 1] - voxels[v, 1]
                    dz = local_coords[a, i, 2] - voxels[v, 2]
                    d = sqrt(dx * dx + dy * dy + dz * dz)
                    w = _kernel(d, r, p)
                    if w <= 0:
                        continue
                    if agg == AGG_AVG_POOL:
                        w = 1
                    for ch in range(c):
                        gfeat[a, i, ch] += w * inv * grad[a, v, ch]
                    if need_coords and agg == AGG_INTERPOLATION and d > 0 and d < r:
                        dl_dw = 0
                        for ch in range(c):
                            dl_dw = dl_dw + grad[a, v, ch] * feats[a, i, ch]
                        dl_dw = (dl_dw - gi) * inv
                        dw_dd = -p * <floating> pow(d, p - 1) / <floating> pow(r, p)
                        w = dl_dw * dw_dd / d
                        gcoord[a, i, 0] += w * dx
                        gcoord[a, i, 1] += w * dy
                        gcoord[a, i, 2] += w * dz
    return gfeat_arr, gcoord_arr


def im2col3d(floating[:, :, :, :, ::1] x, Py_ssize_t k, Py_ssize_t pad,
             floating[:, ::1] out):
    """Channels-last patch extraction; rows are output voxels, columns are
    (kd, kh, kw, channel) with zeros outside the input."""
    cdef Py_ssize_t nb = x.shape[0], d = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t c = x.shape[4]
    cdef Py_ssize_t od = d + 2 * pad - k + 1, oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1
    cdef Py_ssize_t b, p, q, s, i, j, l, zi, zj, zl
    cdef size_t run = c * sizeof(floating)
    cdef floating *src
    cdef floating *dst
    if nb == 0 or out.shape[0] == 0:
        return
    src = &x[0, 0, 0, 0, 0]
    dst = &out[0, 0]
    with nogil:
        for b in range(nb):
            for p in range(od):
                for q in range(oh):
                    for s in range(ow):
                        for i in range(k):
                            zi = p + i - pad
                            for j in range(k):
                                zj = q + j - pad
                                for l in range(k):
                                    zl = s + l - pad
                                    if 0 <= zi < d and 0 <= zj < h and 0 <= zl < w:
                                        memcpy(dst, src + (((b * d + zi) * h + zj) * w + zl) * c,
                                               run)
                                    else:
                                        memset(dst, 0, run)
                                    dst += c


def col2im3d(floating[:, ::1] cols, Py_ssize_t k, Py_ssize_t pad,
             floating[:, :, :, :, ::1] dx):
    """Adjoint of :func:`im2col3d`: scatter-adds ``cols`` into ``dx``."""
    cdef Py_ssize_t nb = dx.shape[0], d = dx.shape[1], h = dx.shape[2], w = dx.shape[3]
    cdef Py_ssize_t c = dx.shape[4]
    cdef Py_ssize_t od = d + 2 * pad - k + 1, oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1
    cdef Py_ssize_t b, p, q, s, i, j, l, ch, zi, zj, zl
    cdef floating *src
    cdef floating *dst
    cdef floating *base
    if nb == 0 or cols.shape[0] == 0:
        return
    src = &cols[0, 0]
    base = &dx[0, 0, 0, 0, 0]
    with nogil:
        for b in range(nb):
            for p in range(od):
                for q in range(oh):
                    for s in range(ow):
                        for i in range(k):
                            zi = p + i - pad
                            for j in range(k):
                                zj = q + j - pad
                                for l in range(k):
                                    zl = s + l - pad
                                    if 0 <= zi < d and 0 <= zj < h and 0 <= zl < w:
                                        dst = base + (((b * d + zi) * h + zj) * w + zl) * c
                                        for ch in range(c):
                                            dst[ch] += src[ch]
                                    src += c
