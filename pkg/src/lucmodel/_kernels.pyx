# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``; results must match exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport pow

cnp.import_array()


def window_counts(index, Py_ssize_t ncat, Py_ssize_t radius):
    cdef const int[:, ::1] idx = np.ascontiguousarray(index, dtype=np.int32)
    cdef Py_ssize_t h = idx.shape[0], w = idx.shape[1]
    out_arr = np.zeros((ncat, h, w), dtype=np.int64)
    cdef long long[:, :, ::1] out = out_arr
    # per-column running counts over the clipped row band, then a sliding row sum
    colsum_arr = np.zeros((ncat, w), dtype=np.int64)
    cdef long long[:, ::1] colsum = colsum_arr
    cdef Py_ssize_t r, c, k, rr, lo, hi, top, bot
    cdef int v
    cdef long long acc
    for r in range(min(radius, h - 1) + 1):
        for c in range(w):
            v = idx[r, c]
            if v >= 0 and v < ncat:
                colsum[v, c] += 1
    for r in range(h):
        if r > 0:
            bot = r + radius
            if bot < h:
                for c in range(w):
                    v = idx[bot, c]
                    if v >= 0 and v < ncat:
                        colsum[v, c] += 1
            top = r - radius - 1
            if top >= 0:
                for c in range(w):
                    v = idx[top, c]
                    if v >= 0 and v < ncat:
                        colsum[v, c] -= 1
        for k in range(ncat):
            acc = 0
            hi = min(radius, w - 1)
            for c in range(hi + 1):
                acc += colsum[k, c]
            for c in range(w):
                if c > 0:
                    if c + radius < w:
                        acc += colsum[k, c + radius]
                    if c - radius - 1 >= 0:
                        acc -= colsum[k, c - radius - 1]
                out[k, r, c] = acc
    return out_arr


cdef inline double _exponent(const unsigned char[:, ::1] state, Py_ssize_t r, Py_ssize_t c,
                             Py_ssize_t h, Py_ssize_t w) nogil:
    cdef double k = 0.0
    if r > 0 and state[r - 1, c] == 1:
        k += 1.0
    if r < h - 1 and state[r + 1, c] == 1:
        k += 1.0
    if c > 0 and state[r, c - 1] == 1:
        k += 1.0
    if c < w - 1 and state[r, c + 1] == 1:
        k += 1.0
    if r > 0 and c > 0 and state[r - 1, c - 1] == 1:
        k += 0.5
    if r > 0 and c < w - 1 and state[r - 1, c + 1] == 1:
        k += 0.5
    if r < h - 1 and c > 0 and state[r + 1, c - 1] == 1:
        k += 0.5
    if r < h - 1 and c < w - 1 and state[r + 1, c + 1] == 1:
        k += 0.5
    return k


def grow_region(eligible, field, Py_ssize_t seed_row, Py_ssize_t seed_col,
                Py_ssize_t target, double isometry):
    cdef const unsigned char[:, ::1] elig = np.ascontiguousarray(eligible, dtype=np.uint8)
    cdef const double[:, ::1] fld = np.ascontiguousarray(field, dtype=np.float64)
    cdef Py_ssize_t h = elig.shape[0], w = elig.shape[1]
    if target <= 0 or not elig[seed_row, seed_col]:
        return np.empty(0, dtype=np.int64)
    # 0 = untouched, 1 = in patch, 2 = on frontier
    state_arr = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] state = state_arr
    cdef Py_ssize_t cap = min(h * w, 4 * target + 8)
    patch_arr = np.empty(min(h * w, target), dtype=np.int64)
    cdef long long[::1] patch = patch_arr
    frontier_arr = np.empty(cap, dtype=np.int64)
    cdef long long[::1] frontier = frontier_arr
    cdef Py_ssize_t npatch = 0, nfront = 0, i, best_i, r, c, rr, cc, d
    cdef long long q, best_q
    cdef double s, best_s
    cdef int[4] drs = [-1, 1, 0, 0]
    cdef int[4] dcs = [0, 0, -1, 1]

    q = seed_row * w + seed_col
    state[seed_row, seed_col] = 1
    patch[npatch] = q
    npatch += 1
    r = seed_row
    c = seed_col
    while True:
        for d in range(4):
            rr = r + drs[d]
            cc = c + dcs[d]
            if rr >= 0 and rr < h and cc >= 0 and cc < w and elig[rr, cc] and state[rr, cc] == 0:
                if nfront == cap:
                    cap *= 2
                    frontier_arr = np.resize(frontier_arr, cap)
                    frontier = frontier_arr
                frontier[nfront] = rr * w + cc
                nfront += 1
                state[rr, cc] = 2
        if npatch >= target or nfront == 0:
            break
        best_i = -1
        best_q = -1
        best_s = 0.0
        for i in range(nfront):
            q = frontier[i]
            rr = q // w
            cc = q - rr * w
            s = fld[rr, cc] * pow(isometry, _exponent(state, rr, cc, h, w))
            if best_i < 0 or s > best_s or (s == best_s and q < best_q):
                best_i = i
                best_q = q
                best_s = s
        nfront -= 1
        frontier[best_i] = frontier[nfront]
        r = best_q // w
        c = best_q - r * w
        state[r, c] = 1
        patch[npatch] = best_q
        npatch += 1
    return patch_arr[:npatch].copy()


def fuzzy_membership(a, b, weights):
    cdef const int[:, ::1] av = np.ascontiguousarray(a, dtype=np.int32)
    cdef const int[:, ::1] bv = np.ascontiguousarray(b, dtype=np.int32)
    cdef const double[:, ::1] wt = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t h = av.shape[0], w = av.shape[1], rad = wt.shape[0] // 2
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c, dr, dc, rr, cc
    cdef int target
    cdef double best, x
    with nogil:
        for r in range(h):
            for c in range(w):
                target = av[r, c]
                if target < 0:
                    continue
                best = 0.0
                for dr in range(-rad, rad + 1):
                    rr = r + dr
                    if rr < 0 or rr >= h:
                        continue
                    for dc in range(-rad, rad + 1):
                        cc = c + dc
                        if cc < 0 or cc >= w:
                            continue
                        x = wt[dr + rad, dc + rad]
                        if x > best and bv[rr, cc] == target:
                            best = x
                out[r, c] = best
    return out_arr
