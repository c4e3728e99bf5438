"""Pure-Python/NumPy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` must return identical results.
"""
import math

import numpy as np

_ORTHO = ((-1, 0), (1, 0), (0, -1), (0, 1))
_DIAG = ((-1, -1), (-1, 1), (1, -1), (1, 1))


def window_counts(index, ncat, radius):
    """Count category positions ``0..ncat-1`` of ``index`` in a clipped square window.

    ``index`` is int32 ``(H, W)`` with ``-1`` for cells that are not counted.
    Returns int64 ``(ncat, H, W)``.
    """
    index = np.asarray(index)
    h, w = index.shape
    out = np.empty((ncat, h, w), dtype=np.int64)
    r = int(radius)
    for k in range(ncat):
        onehot = (index == k).astype(np.int64)
        integ = np.zeros((h + 1, w + 1), dtype=np.int64)
        integ[1:, 1:] = onehot.cumsum(0).cumsum(1)
        r0 = np.clip(np.arange(h) - r, 0, h)
        r1 = np.clip(np.arange(h) + r + 1, 0, h)
        c0 = np.clip(np.arange(w) - r, 0, w)
        c1 = np.clip(np.arange(w) + r + 1, 0, w)
        out[k] = (integ[r1[:, None], c1[None, :]] - integ[r0[:, None], c1[None, :]]
                  - integ[r1[:, None], c0[None, :]] + integ[r0[:, None], c0[None, :]])
    return out


def grow_region(eligible, field, seed_row, seed_col, target, isometry):
    """Greedy compact region growing from a seed.

    Repeatedly adds the 4-connected frontier cell with the highest
    ``field * isometry ** k``, where ``k`` counts in-patch orthogonal neighbours
    as 1 and diagonal ones as 0.5. Ties go to the lowest row-major index.
    Returns flat indices in the order they were added.
    """
    eligible = np.asarray(eligible)
    field = np.asarray(field, dtype=np.float64)
    h, w = eligible.shape
    seed = seed_row * w + seed_col
    if target <= 0 or not eligible[seed_row, seed_col]:
        return np.empty(0, dtype=np.int64)
    in_patch = {seed}
    patch = [seed]
    frontier = set()

    def push(p):
        r, c = divmod(p, w)
        for dr, dc in _ORTHO:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and eligible[rr, cc]:
                q = rr * w + cc
                if q not in in_patch:
                    frontier.add(q)

    push(seed)
    iso = float(isometry)
    while len(patch) < target and frontier:
        best_q = -1
        best_s = 0.0
        for q in frontier:
            r, c = divmod(q, w)
            k = 0.0
            for dr, dc in _ORTHO:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and rr * w + cc in in_patch:
                    k += 1.0
            for dr, dc in _DIAG:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and rr * w + cc in in_patch:
                    k += 0.5
            s = field[r, c] * math.pow(iso, k)
            if best_q < 0 or s > best_s or (s == best_s and q < best_q):
                best_q, best_s = q, s
        frontier.discard(best_q)
        in_patch.add(best_q)
        patch.append(best_q)
        push(best_q)
    return np.array(patch, dtype=np.int64)


def fuzzy_membership(a, b, weights):
    """For every cell x, the max weight over window offsets where ``b[x+o] == a[x]``.

    ``weights`` is a ``(2r+1, 2r+1)`` table of decay weights indexed by offset;
    cells with ``a < 0`` get 0 and ``b < 0`` never matches.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    weights = np.asarray(weights, dtype=np.float64)
    h, w = a.shape
    r = weights.shape[0] // 2
    out = np.zeros((h, w), dtype=np.float64)
    pad = np.full((h + 2 * r, w + 2 * r), -1, dtype=b.dtype)
    pad[r:r + h, r:r + w] = b
    valid = a >= 0
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            wt = weights[dr + r, dc + r]
            if wt <= 0.0:
                continue
            shifted = pad[r + dr:r + dr + h, r + dc:r + dc + w]
            hit = valid & (shifted == a)
            np.maximum(out, np.where(hit, wt, 0.0), out=out)
    return out
