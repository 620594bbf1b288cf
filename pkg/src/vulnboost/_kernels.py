"""Compiled inner loops for histogram-based tree growth.

Histograms have shape ``(n_features, n_bins_max, 3)`` holding the sum of
gradients, the sum of hessians and the sample count per bin.  Rows are always
accumulated in ascending row order so floating-point sums are reproducible.
"""
import numpy as np
from numba import njit

TIE_TOL = 1e-12


@njit(nogil=True, cache=True)
def build_histogram(codes, grad, hess, rows, features, n_bins_max):
    hist = np.zeros((codes.shape[1], n_bins_max, 3))
    for r in range(rows.shape[0]):
        i = rows[r]
        gi = grad[i]
        hi = hess[i]
        for t in range(features.shape[0]):
            f = features[t]
            b = codes[i, f]
            hist[f, b, 0] += gi
            hist[f, b, 1] += hi
            hist[f, b, 2] += 1.0
    return hist


@njit(nogil=True, cache=True)
def find_best_split(hist, features, n_bins, lam, gamma, min_leaf):
    """Scan every ``bin <= b`` cut of the sampled features.

    Returns ``(feature, bin, gain)``; feature is -1 when no cut has positive
    gain with both children holding at least ``min_leaf`` rows.  Gains within
    a relative ``TIE_TOL`` count as equal, and the lowest (feature, bin) among
    equal gains wins, so cuts that induce the same partition are not decided by
    summation-order rounding.
    """
    best_f = -1
    best_b = -1
    best_gain = 0.0
    for t in range(features.shape[0]):
        f = features[t]
        nb = n_bins[f]
        if nb < 2:
            continue
        G = 0.0
        H = 0.0
        C = 0.0
        for b in range(nb):
            G += hist[f, b, 0]
            H += hist[f, b, 1]
            C += hist[f, b, 2]
        parent = G * G / (H + lam)
        gl = 0.0
        hl = 0.0
        cl = 0.0
        for b in range(nb - 1):
            gl += hist[f, b, 0]
            hl += hist[f, b, 1]
            cl += hist[f, b, 2]
            if cl < min_leaf:
                continue
            if C - cl < min_leaf:
                break
            gr = G - gl
            hr = H - hl
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent - 2.0 * gamma
            if gain > 0.0 and gain > best_gain * (1.0 + TIE_TOL):
                best_gain = gain
                best_f = f
                best_b = b
    return best_f, best_b, best_gain


@njit(nogil=True, cache=True)
def _fill_histogram(out, codes, grad, hess, rows, features, n_bins):
    for t in range(features.shape[0]):
        f = features[t]
        for b in range(n_bins[f]):
            out[f, b, 0] = 0.0
            out[f, b, 1] = 0.0
            out[f, b, 2] = 0.0
    for r in range(rows.shape[0]):
        i = rows[r]
        gi = grad[i]
        hi = hess[i]
        for t in range(features.shape[0]):
            f = features[t]
            b = codes[i, f]
            out[f, b, 0] += gi
            out[f, b, 1] += hi
            out[f, b, 2] += 1.0


@njit(nogil=True, cache=True)
def grow_tree(codes, grad, hess, rows, features, n_bins, n_bins_max,
              num_leaves, max_depth, lam, gamma, min_leaf):
    """Leaf-wise growth: always split the open leaf with the largest gain.

    Only the smaller child's histogram is accumulated from rows; the larger
    child's is the parent's minus the smaller one.  Returns node arrays
    ``(feature, threshold_bin, left, right, value)``; leaves have
    ``feature == -1``.
    """
    n_rows = rows.shape[0]
    max_nodes = 2 * max(num_leaves, 1) - 1
    feat = np.full(max_nodes, -1, np.int64)
    thr = np.full(max_nodes, -1, np.int64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    value = np.zeros(max_nodes)
    depth = np.zeros(max_nodes, np.int64)
    start = np.zeros(max_nodes, np.int64)
    stop = np.zeros(max_nodes, np.int64)
    cand_f = np.full(max_nodes, -1, np.int64)
    cand_b = np.full(max_nodes, -1, np.int64)
    cand_gain = np.zeros(max_nodes)

    # one histogram slot per open splittable leaf; the pool doubles on demand
    n_slots = min(8, num_leaves + 1)
    slots = np.empty((n_slots, codes.shape[1], n_bins_max, 3))
    slot_of = np.full(max_nodes, -1, np.int64)
    free = np.empty(max_nodes + 1, np.int64)
    free[:n_slots] = np.arange(n_slots - 1, -1, -1)
    n_free = n_slots

    order = rows.copy()
    buf = np.empty_like(order)
    n_nodes = 1
    stop[0] = n_rows
    if num_leaves > 1 and max_depth > 0 and n_rows >= 2 * min_leaf and n_rows >= 2:
        n_free -= 1
        s0 = free[n_free]
        slot_of[0] = s0
        _fill_histogram(slots[s0], codes, grad, hess, order, features, n_bins)
        f, b, g = find_best_split(slots[s0], features, n_bins, lam, gamma, min_leaf)
        cand_f[0] = f
        cand_b[0] = b
        cand_gain[0] = g
        if f < 0:
            free[n_free] = s0
            n_free += 1
            slot_of[0] = -1

    n_leaves = 1
    while n_leaves < num_leaves:
        node = -1
        best = 0.0
        for k in range(n_nodes):
            if feat[k] == -1 and cand_f[k] >= 0 and cand_gain[k] > best * (1.0 + TIE_TOL):
                best = cand_gain[k]
                node = k
        if node < 0:
            break
        f = cand_f[node]
        b = cand_b[node]
        s = start[node]
        e = stop[node]
        # stable partition keeps both children in ascending row order
        nl = 0
        nr = 0
        for r in range(s, e):
            i = order[r]
            if codes[i, f] <= b:
                order[s + nl] = i
                nl += 1
            else:
                buf[nr] = i
                nr += 1
        for r in range(nr):
            order[s + nl + r] = buf[r]

        feat[node] = f
        thr[node] = b
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = s
        stop[lc] = s + nl
        start[rc] = s + nl
        stop[rc] = e
        depth[lc] = depth[node] + 1
        depth[rc] = depth[node] + 1
        n_leaves += 1

        parent_slot = slot_of[node]
        slot_of[node] = -1
        if n_leaves >= num_leaves or depth[lc] >= max_depth:
            free[n_free] = parent_slot
            n_free += 1
            continue
        if nl <= nr:
            small = lc
            large = rc
        else:
            small = rc
            large = lc
        if n_free == 0:
            grown = np.empty((2 * n_slots, codes.shape[1], n_bins_max, 3))
            grown[:n_slots] = slots
            slots = grown
            for q in range(n_slots):
                free[q] = 2 * n_slots - 1 - q
            n_free = n_slots
            n_slots *= 2
        n_free -= 1
        small_slot = free[n_free]
        _fill_histogram(slots[small_slot], codes, grad, hess,
                        order[start[small]:stop[small]], features, n_bins)
        for t in range(features.shape[0]):
            ft = features[t]
            for bb in range(n_bins[ft]):
                for q in range(3):
                    slots[parent_slot, ft, bb, q] -= slots[small_slot, ft, bb, q]
        slot_of[small] = small_slot
        slot_of[large] = parent_slot
        for child in (lc, rc):
            cs = slot_of[child]
            cnt = stop[child] - start[child]
            if cnt >= 2 * min_leaf and cnt >= 2:
                cf, cb, cg = find_best_split(slots[cs], features, n_bins, lam, gamma, min_leaf)
                cand_f[child] = cf
                cand_b[child] = cb
                cand_gain[child] = cg
            if cand_f[child] < 0:
                free[n_free] = cs
                n_free += 1
                slot_of[child] = -1

    for k in range(n_nodes):
        if feat[k] == -1:
            G = 0.0
            H = 0.0
            for r in range(start[k], stop[k]):
                G += grad[order[r]]
                H += hess[order[r]]
            value[k] = -G / (H + lam)
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@njit(nogil=True, cache=True)
def apply_tree(codes, feat, thr, left, right):
    """Leaf node id reached by every row."""
    out = np.empty(codes.shape[0], np.int64)
    for i in range(codes.shape[0]):
        k = 0
        while feat[k] >= 0:
            if codes[i, feat[k]] <= thr[k]:
                k = left[k]
            else:
                k = right[k]
        out[i] = k
    return out


@njit(nogil=True, cache=True)
def add_tree_scores(scores, codes, feat, thr, left, right, value, scale):
    for i in range(codes.shape[0]):
        k = 0
        while feat[k] >= 0:
            if codes[i, feat[k]] <= thr[k]:
                k = left[k]
            else:
                k = right[k]
        scores[i] += scale * value[k]
