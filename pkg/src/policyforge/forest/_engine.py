"""Compiled tree-growing kernels shared by the regression and causal forests.

Features are pre-binned: column ``j`` gets sorted candidate thresholds
``thr_j`` and code ``c`` means ``thr_j[c-1] < x <= thr_j[c]``. A split at
bin ``b`` sends a row left iff its code is ``<= b`` (equivalently
``x <= thr_j[b]``).

Trees live in ``(n_trees, capacity)`` node arrays; ``feat == -1`` marks a
leaf. Every tree reseeds the kernel generator from its own seed, so a tree
depends only on its seed and the data.
"""

from __future__ import annotations

import numpy as np
from numba import njit

SMALL_NODE = 16


def make_bins(x: np.ndarray, max_bins: int = 256, exact_below: int = 512):
    """Candidate thresholds (midpoints of consecutive unique values) per column.

    For ``n > exact_below`` a column with more than ``max_bins`` candidates
    keeps ``max_bins`` of them at evenly spaced quantile positions.
    """
    n, p = x.shape
    thresholds = []
    for j in range(p):
        u = np.unique(x[:, j])
        mids = (u[:-1] + u[1:]) / 2.0
        if n > exact_below and mids.size > max_bins:
            pick = np.unique(np.round(np.linspace(0, mids.size - 1, max_bins)).astype(np.int64))
            mids = mids[pick]
        thresholds.append(mids)
    return thresholds


def apply_bins(x: np.ndarray, thresholds) -> tuple[np.ndarray, np.ndarray]:
    """Codes (``n x p`` int32) and bins per column for ``x`` under ``thresholds``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != len(thresholds):
        raise ValueError(f"expected {len(thresholds)} covariates, got {x.shape[1]}")
    codes = np.empty(x.shape, dtype=np.int32)
    for j, thr in enumerate(thresholds):
        codes[:, j] = np.searchsorted(thr, x[:, j], side="left")
    nbins = np.array([len(t) + 1 for t in thresholds], dtype=np.int64)
    return codes, nbins


def node_capacity(n_rows: int, min_leaf: int) -> int:
    return 2 * max(1, n_rows // max(1, min_leaf)) + 1


@njit(cache=True)
def _partial_shuffle(idx, m):
    n = idx.shape[0]
    for i in range(m):
        j = i + np.random.randint(0, n - i)
        t = idx[i]
        idx[i] = idx[j]
        idx[j] = t


@njit(cache=True)
def _pick_features(buf, mtry):
    p = buf.shape[0]
    for i in range(p):
        buf[i] = i
    _partial_shuffle(buf, mtry)
    # ascending order so ties resolve to the lower feature index
    for i in range(1, mtry):
        v = buf[i]
        k = i - 1
        while k >= 0 and buf[k] > v:
            buf[k + 1] = buf[k]
            k -= 1
        buf[k + 1] = v


@njit(cache=True)
def _leaf_of(codes, i, feat, bin_, left, right, t):
    node = 0
    while feat[t, node] >= 0:
        if codes[i, feat[t, node]] <= bin_[t, node]:
            node = left[t, node]
        else:
            node = right[t, node]
    return node


@njit(cache=True)
def _partition(rows, s, e, codes, f, b):
    mid = s
    for r in range(s, e):
        i = rows[r]
        if codes[i, f] <= b:
            rows[r] = rows[mid]
            rows[mid] = i
            mid += 1
    return mid


# ---------------------------------------------------------------------------
# regression trees (squared-error criterion)


@njit(cache=True)
def _reg_stats(codes, yc, rows, s, e, f, nb, hc, hs, uc, cc, ss):
    """Per-distinct-code counts and sums of ``yc`` for rows[s:e], in code order."""
    m = e - s
    k = 0
    if m <= SMALL_NODE:
        for r in range(s, e):
            c = codes[rows[r], f]
            v = yc[rows[r]]
            pos = k
            while pos > 0 and uc[pos - 1] > c:
                pos -= 1
            if pos > 0 and uc[pos - 1] == c:
                cc[pos - 1] += 1
                ss[pos - 1] += v
                continue
            for q in range(k, pos, -1):
                uc[q] = uc[q - 1]
                cc[q] = cc[q - 1]
                ss[q] = ss[q - 1]
            uc[pos] = c
            cc[pos] = 1
            ss[pos] = v
            k += 1
        return k
    for b in range(nb):
        hc[b] = 0
        hs[b] = 0.0
    for r in range(s, e):
        i = rows[r]
        c = codes[i, f]
        hc[c] += 1
        hs[c] += yc[i]
    for b in range(nb):
        if hc[b] > 0:
            uc[k] = b
            cc[k] = hc[b]
            ss[k] = hs[b]
            k += 1
    return k


@njit(cache=True)
def _grow_regression(codes, y, nbins, rows, n_rows, mtry, min_leaf, max_depth,
                     feat, bin_, left, right, value, t,
                     yc, hc, hs, uc, cc, ss, fbuf, stack):
    feat[t, 0] = -1
    n_nodes = 1
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_rows
    stack[0, 3] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        d = stack[sp, 3]
        m = e - s
        ref = y[rows[s]]
        acc = 0.0
        for r in range(s, e):
            yc[rows[r]] = y[rows[r]] - ref
            acc += yc[rows[r]]
        value[t, node] = ref + acc / m
        feat[t, node] = -1
        if m < 2 * min_leaf or (max_depth >= 0 and d >= max_depth):
            continue
        parent = acc * acc / m
        best = parent
        bf = -1
        bb = -1
        _pick_features(fbuf, mtry)
        for fi in range(mtry):
            f = fbuf[fi]
            k = _reg_stats(codes, yc, rows, s, e, f, nbins[f], hc, hs, uc, cc, ss)
            lc = 0
            ls = 0.0
            for a in range(k - 1):
                lc += cc[a]
                ls += ss[a]
                rc = m - lc
                if lc < min_leaf:
                    continue
                if rc < min_leaf:
                    break
                rs = acc - ls
                score = ls * ls / lc + rs * rs / rc
                if score > best:
                    best = score
                    bf = f
                    bb = uc[a]
        if bf < 0 or not best > parent:
            continue
        mid = _partition(rows, s, e, codes, bf, bb)
        feat[t, node] = bf
        bin_[t, node] = bb
        left[t, node] = n_nodes
        right[t, node] = n_nodes + 1
        stack[sp, 0] = n_nodes
        stack[sp, 1] = s
        stack[sp, 2] = mid
        stack[sp, 3] = d + 1
        stack[sp + 1, 0] = n_nodes + 1
        stack[sp + 1, 1] = mid
        stack[sp + 1, 2] = e
        stack[sp + 1, 3] = d + 1
        sp += 2
        n_nodes += 2
    return n_nodes


@njit(cache=True)
def fit_regression_kernel(codes, y, nbins, seeds, m_sub, mtry, min_leaf, max_depth, cap):
    """Grow ``len(seeds)`` trees on subsamples of size ``m_sub``.

    Returns node arrays plus out-of-bag sums: ``oob_ref`` (first OOB tree's
    value per row), ``oob_dev`` (sum of deviations from it), ``oob_cnt``.
    Shifting by a reference makes the average exact for constant targets.
    """
    n, p = codes.shape
    T = seeds.shape[0]
    feat = np.full((T, cap), -1, dtype=np.int32)
    bin_ = np.zeros((T, cap), dtype=np.int32)
    left = np.zeros((T, cap), dtype=np.int32)
    right = np.zeros((T, cap), dtype=np.int32)
    value = np.zeros((T, cap))
    oob_ref = np.zeros(n)
    oob_dev = np.zeros(n)
    oob_cnt = np.zeros(n, dtype=np.int64)
    nbmax = 1
    for j in range(p):
        nbmax = max(nbmax, nbins[j])
    idx = np.empty(n, dtype=np.int64)
    rows = np.empty(m_sub, dtype=np.int64)
    inbag = np.zeros(n, dtype=np.bool_)
    yc = np.zeros(n)
    hc = np.zeros(nbmax, dtype=np.int64)
    hs = np.zeros(nbmax)
    uc = np.zeros(max(nbmax, SMALL_NODE + 1), dtype=np.int64)
    cc = np.zeros(uc.shape[0], dtype=np.int64)
    ss = np.zeros(uc.shape[0])
    fbuf = np.empty(p, dtype=np.int64)
    stack = np.empty((cap + 2, 4), dtype=np.int64)
    for t in range(T):
        np.random.seed(seeds[t])
        for i in range(n):
            idx[i] = i
        _partial_shuffle(idx, m_sub)
        for r in range(m_sub):
            rows[r] = idx[r]
            inbag[idx[r]] = True
        _grow_regression(codes, y, nbins, rows, m_sub, mtry, min_leaf, max_depth,
                         feat, bin_, left, right, value, t,
                         yc, hc, hs, uc, cc, ss, fbuf, stack)
        for i in range(n):
            if inbag[i]:
                inbag[i] = False
                continue
            v = value[t, _leaf_of(codes, i, feat, bin_, left, right, t)]
            if oob_cnt[i] == 0:
                oob_ref[i] = v
            else:
                oob_dev[i] += v - oob_ref[i]
            oob_cnt[i] += 1
    return feat, bin_, left, right, value, oob_ref, oob_dev, oob_cnt


@njit(cache=True)
def predict_regression_kernel(codes, feat, bin_, left, right, value):
    n = codes.shape[0]
    T = feat.shape[0]
    out = np.empty(n)
    for i in range(n):
        ref = value[0, _leaf_of(codes, i, feat, bin_, left, right, 0)]
        dev = 0.0
        for t in range(1, T):
            dev += value[t, _leaf_of(codes, i, feat, bin_, left, right, t)] - ref
        out[i] = ref + dev / T
    return out


# ---------------------------------------------------------------------------
# honest causal trees


@njit(cache=True)
def _causal_stats(codes, w, wr, yr, rows, s, e, f, nb, hc, ht, h2, hy, uc, cc, ct, c2, cy):
    m = e - s
    k = 0
    if m <= SMALL_NODE:
        for r in range(s, e):
            i = rows[r]
            c = codes[i, f]
            pos = k
            while pos > 0 and uc[pos - 1] > c:
                pos -= 1
            if pos > 0 and uc[pos - 1] == c:
                cc[pos - 1] += 1
                ct[pos - 1] += w[i]
                c2[pos - 1] += wr[i] * wr[i]
                cy[pos - 1] += wr[i] * yr[i]
                continue
            for q in range(k, pos, -1):
                uc[q] = uc[q - 1]
                cc[q] = cc[q - 1]
                ct[q] = ct[q - 1]
                c2[q] = c2[q - 1]
                cy[q] = cy[q - 1]
            uc[pos] = c
            cc[pos] = 1
            ct[pos] = w[i]
            c2[pos] = wr[i] * wr[i]
            cy[pos] = wr[i] * yr[i]
            k += 1
        return k
    for b in range(nb):
        hc[b] = 0
        ht[b] = 0
        h2[b] = 0.0
        hy[b] = 0.0
    for r in range(s, e):
        i = rows[r]
        c = codes[i, f]
        hc[c] += 1
        ht[c] += w[i]
        h2[c] += wr[i] * wr[i]
        hy[c] += wr[i] * yr[i]
    for b in range(nb):
        if hc[b] > 0:
            uc[k] = b
            cc[k] = hc[b]
            ct[k] = ht[b]
            c2[k] = h2[b]
            cy[k] = hy[b]
            k += 1
    return k


@njit(cache=True)
def _grow_causal(codes, w, wr, yr, nbins, rows, n_rows, mtry, min_leaf, alpha, max_depth,
                 feat, bin_, left, right, t,
                 hc, ht, h2, hy, uc, cc, ct, c2, cy, fbuf, stack):
    """Split on ``rows`` maximising n_L n_R (tau_L - tau_R)^2.

    ``tau`` of a child is its residual-on-residual slope sum(wr*yr)/sum(wr^2).
    Each child keeps at least ``min_leaf`` rows and, in each treatment arm,
    at least ``max(1, ceil(alpha * m))`` of the parent's ``m`` rows.
    """
    feat[t, 0] = -1
    n_nodes = 1
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_rows
    stack[0, 3] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        d = stack[sp, 3]
        m = e - s
        feat[t, node] = -1
        if m < 2 * min_leaf or (max_depth >= 0 and d >= max_depth):
            continue
        tt = 0
        t2 = 0.0
        ty = 0.0
        for r in range(s, e):
            i = rows[r]
            tt += w[i]
            t2 += wr[i] * wr[i]
            ty += wr[i] * yr[i]
        mc = max(1, int(np.ceil(alpha * m)))
        if tt < 2 * mc or m - tt < 2 * mc:
            continue
        best = 0.0
        bf = -1
        bb = -1
        _pick_features(fbuf, mtry)
        for fi in range(mtry):
            f = fbuf[fi]
            k = _causal_stats(codes, w, wr, yr, rows, s, e, f, nbins[f],
                              hc, ht, h2, hy, uc, cc, ct, c2, cy)
            lc = 0
            lt = 0
            l2 = 0.0
            ly = 0.0
            for a in range(k - 1):
                lc += cc[a]
                lt += ct[a]
                l2 += c2[a]
                ly += cy[a]
                rc = m - lc
                if lc < min_leaf:
                    continue
                if rc < min_leaf:
                    break
                rt = tt - lt
                if lt < mc or lc - lt < mc or rt < mc or rc - rt < mc:
                    continue
                r2 = t2 - l2
                if l2 <= 0.0 or r2 <= 0.0:
                    continue
                diff = ly / l2 - (ty - ly) / r2
                score = lc * rc * diff * diff
                if score > best:
                    best = score
                    bf = f
                    bb = uc[a]
        if bf < 0:
            continue
        mid = _partition(rows, s, e, codes, bf, bb)
        feat[t, node] = bf
        bin_[t, node] = bb
        left[t, node] = n_nodes
        right[t, node] = n_nodes + 1
        stack[sp, 0] = n_nodes
        stack[sp, 1] = s
        stack[sp, 2] = mid
        stack[sp, 3] = d + 1
        stack[sp + 1, 0] = n_nodes + 1
        stack[sp + 1, 1] = mid
        stack[sp + 1, 2] = e
        stack[sp + 1, 3] = d + 1
        sp += 2
        n_nodes += 2
    return n_nodes


@njit(cache=True)
def fit_causal_kernel(codes, w, wr, yr, nbins, seeds, m_sub, m_split, mtry, min_leaf, alpha, max_depth, cap):
    """Honest causal trees.

    Each tree draws a subsample of ``m_sub`` rows; the first ``m_split``
    grow the tree and the rest fill the leaves with ``num = sum(wr*yr)``,
    ``den = sum(wr^2)`` and ``cnt``.
    """
    n, p = codes.shape
    T = seeds.shape[0]
    m_est = m_sub - m_split
    feat = np.full((T, cap), -1, dtype=np.int32)
    bin_ = np.zeros((T, cap), dtype=np.int32)
    left = np.zeros((T, cap), dtype=np.int32)
    right = np.zeros((T, cap), dtype=np.int32)
    num = np.zeros((T, cap))
    den = np.zeros((T, cap))
    cnt = np.zeros((T, cap), dtype=np.int64)
    split_idx = np.empty((T, m_split), dtype=np.int64)
    est_idx = np.empty((T, m_est), dtype=np.int64)
    nbmax = 1
    for j in range(p):
        nbmax = max(nbmax, nbins[j])
    idx = np.empty(n, dtype=np.int64)
    rows = np.empty(m_split, dtype=np.int64)
    hc = np.zeros(nbmax, dtype=np.int64)
    ht = np.zeros(nbmax, dtype=np.int64)
    h2 = np.zeros(nbmax)
    hy = np.zeros(nbmax)
    ucap = max(nbmax, SMALL_NODE + 1)
    uc = np.zeros(ucap, dtype=np.int64)
    cc = np.zeros(ucap, dtype=np.int64)
    ct = np.zeros(ucap, dtype=np.int64)
    c2 = np.zeros(ucap)
    cy = np.zeros(ucap)
    fbuf = np.empty(p, dtype=np.int64)
    stack = np.empty((cap + 2, 4), dtype=np.int64)
    for t in range(T):
        np.random.seed(seeds[t])
        for i in range(n):
            idx[i] = i
        _partial_shuffle(idx, m_sub)
        for r in range(m_split):
            rows[r] = idx[r]
            split_idx[t, r] = idx[r]
        for r in range(m_est):
            est_idx[t, r] = idx[m_split + r]
        _grow_causal(codes, w, wr, yr, nbins, rows, m_split, mtry, min_leaf, alpha, max_depth,
                     feat, bin_, left, right, t,
                     hc, ht, h2, hy, uc, cc, ct, c2, cy, fbuf, stack)
        for r in range(m_est):
            i = est_idx[t, r]
            leaf = _leaf_of(codes, i, feat, bin_, left, right, t)
            num[t, leaf] += wr[i] * yr[i]
            den[t, leaf] += wr[i] * wr[i]
            cnt[t, leaf] += 1
    return feat, bin_, left, right, num, den, cnt, split_idx, est_idx


@njit(cache=True)
def predict_causal_kernel(codes, feat, bin_, left, right, num, den, cnt, split_idx, est_idx, oob):
    """Kernel-weighted ratio sum_b(num/cnt) / sum_b(den/cnt) per query row.

    With ``oob`` the query rows are the training rows and trees whose
    subsample holds the row are skipped. Trees whose leaf got no estimation
    rows carry no weight. Returns numerator, denominator and tree count.
    """
    n = codes.shape[0]
    T = feat.shape[0]
    a = np.zeros(n)
    b = np.zeros(n)
    used = np.zeros(n, dtype=np.int64)
    member = np.zeros(n, dtype=np.bool_)
    for t in range(T):
        if oob:
            for r in range(split_idx.shape[1]):
                member[split_idx[t, r]] = True
            for r in range(est_idx.shape[1]):
                member[est_idx[t, r]] = True
        for i in range(n):
            if oob and member[i]:
                continue
            leaf = _leaf_of(codes, i, feat, bin_, left, right, t)
            c = cnt[t, leaf]
            if c == 0:
                continue
            a[i] += num[t, leaf] / c
            b[i] += den[t, leaf] / c
            used[i] += 1
        if oob:
            for r in range(split_idx.shape[1]):
                member[split_idx[t, r]] = False
            for r in range(est_idx.shape[1]):
                member[est_idx[t, r]] = False
    return a, b, used


@njit(cache=True)
def kernel_weights_kernel(codes_q, codes_tr, feat, bin_, left, right, cnt, est_idx):
    """alpha[q, i]: average over contributing trees of 1{i shares q's leaf}/|leaf|."""
    nq = codes_q.shape[0]
    n = codes_tr.shape[0]
    T = feat.shape[0]
    alpha = np.zeros((nq, n))
    used = np.zeros(nq, dtype=np.int64)
    est_leaf = np.empty(est_idx.shape[1], dtype=np.int64)
    for t in range(T):
        for r in range(est_idx.shape[1]):
            est_leaf[r] = _leaf_of(codes_tr, est_idx[t, r], feat, bin_, left, right, t)
        for q in range(nq):
            leaf = _leaf_of(codes_q, q, feat, bin_, left, right, t)
            c = cnt[t, leaf]
            if c == 0:
                continue
            used[q] += 1
            for r in range(est_idx.shape[1]):
                if est_leaf[r] == leaf:
                    alpha[q, est_idx[t, r]] += 1.0 / c
    for q in range(nq):
        if used[q] > 0:
            for i in range(n):
                alpha[q, i] /= used[q]
    return alpha
