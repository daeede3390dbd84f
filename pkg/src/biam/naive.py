"""Straight-loop reference implementations used as independent oracles.

Everything here trades speed for obviousness: explicit Python loops over
regions, heads and channels, no batched matrix products, sorting via tuple
keys.  The verification suite compares the fast engine against these on tiny
configurations; keep this module free of imports from the fast paths.
"""

from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, kernel, bias=None):
    h, w, c_in = x.shape
    k = kernel.shape[0]
    pad = (k - 1) // 2
    c_out = kernel.shape[3]
    out = np.zeros((h, w, c_out), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for co in range(c_out):
                acc = 0.0
                for ki in range(k):
                    for kj in range(k):
                        si, sj = i + ki - pad, j + kj - pad
                        if 0 <= si < h and 0 <= sj < w:
                            for ci in range(c_in):
                                acc += float(x[si, sj, ci]) * float(
                                    kernel[ki, kj, ci, co]
                                )
                if bias is not None:
                    acc += float(bias[co])
                out[i, j, co] = acc
    return out


def naive_relu(x):
    out = np.array(x, dtype=np.float64, copy=True)
    flat = out.ravel()
    for i in range(flat.size):
        if flat[i] < 0:
            flat[i] = 0.0
    return out


def naive_batchnorm(x, bn, mode):
    """Single-image (h, w, c) normalization mirroring batch-of-one training."""
    h, w, c = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for ch in range(c):
        if mode == "train":
            vals = [float(x[i, j, ch]) for i in range(h) for j in range(w)]
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
        else:
            mean = float(bn.running_mean[ch])
            var = float(bn.running_var[ch])
        inv = 1.0 / math.sqrt(var + bn.eps)
        for i in range(h):
            for j in range(w):
                out[i, j, ch] = (
                    float(bn.gamma[ch]) * (float(x[i, j, ch]) - mean) * inv
                    + float(bn.beta[ch])
                )
    return out


def _naive_softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def naive_rcb(h_r, params):
    h, w, d_r = h_r.shape
    hw = h * w
    nheads = len(params.w_q)
    dh = d_r // nheads
    regions = h_r.reshape(hw, d_r)

    concat = np.zeros((hw, d_r), dtype=np.float64)
    for hi in range(nheads):
        wq = params.w_q[hi][0, 0]
        wk = params.w_k[hi][0, 0]
        wv = params.w_v[hi][0, 0]
        q = [[sum(float(regions[r, c]) * float(wq[c, d]) for c in range(d_r)) for d in range(dh)] for r in range(hw)]
        k = [[sum(float(regions[r, c]) * float(wk[c, d]) for c in range(d_r)) for d in range(dh)] for r in range(hw)]
        v = [[sum(float(regions[r, c]) * float(wv[c, d]) for c in range(d_r)) for d in range(dh)] for r in range(hw)]
        scale = 1.0 / math.sqrt(dh)
        for r1 in range(hw):
            logits = [
                sum(q[r1][d] * k[r2][d] for d in range(dh)) * scale
                for r2 in range(hw)
            ]
            rel = _naive_softmax_row(logits)
            for d in range(dh):
                concat[r1, hi * dh + d] = sum(
                    rel[r2] * v[r2][d] for r2 in range(hw)
                )

    wo = params.w_o[0, 0]
    o_r = np.zeros((hw, d_r), dtype=np.float64)
    for r in range(hw):
        for co in range(d_r):
            o_r[r, co] = sum(float(concat[r, ci]) * float(wo[ci, co]) for ci in range(d_r))

    u = regions.astype(np.float64) + o_r
    w1, b1 = params.cr1.kernel[0, 0], params.cr1.bias
    w2, b2 = params.cr2.kernel[0, 0], params.cr2.bias
    e_r = np.zeros((hw, d_r), dtype=np.float64)
    for r in range(hw):
        t1 = [
            sum(u[r, ci] * float(w1[ci, co]) for ci in range(d_r)) + float(b1[co])
            for co in range(d_r)
        ]
        t2 = [max(v, 0.0) for v in t1]
        for co in range(d_r):
            t3 = sum(t2[ci] * float(w2[ci, co]) for ci in range(d_r)) + float(b2[co])
            e_r[r, co] = t3 + u[r, co]
    return e_r.reshape(h, w, d_r)


def naive_scb(h_r, x_g, params, mode):
    h, w, d_r = h_r.shape
    d_g = x_g.shape[0]
    q_g = [
        sum(float(h_r[i, j, c]) for i in range(h) for j in range(w)) / (h * w)
        for c in range(d_r)
    ]
    k_g = [
        sum(float(x_g[d]) * float(params.w_g[d, c]) for d in range(d_g))
        for c in range(d_r)
    ]
    rel = [1.0 / (1.0 + math.exp(-(q_g[c] * k_g[c]))) for c in range(d_r)]
    alpha = np.zeros((h, w, d_r), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for c in range(d_r):
                alpha[i, j, c] = float(h_r[i, j, c]) * rel[c]
    conv = naive_conv2d(alpha, params.cg.kernel, params.cg.bias)
    normed = naive_batchnorm(naive_relu(conv), params.bn_g, mode)
    return normed + np.asarray(h_r, dtype=np.float64)


def naive_biam_forward(x_r, x_g, params, mode="eval"):
    """Returns (h_r, e_r, e_g, e_f) computed with explicit loops."""
    conv = naive_conv2d(x_r, params.conv_in.kernel, params.conv_in.bias)
    h_r = naive_batchnorm(naive_relu(conv), params.bn_in, mode)
    e_r = naive_rcb(h_r, params)
    e_g = naive_scb(h_r, x_g, params, mode)
    h, w, d_r = h_r.shape
    cf_w, cf_b = params.cf.kernel[0, 0], params.cf.bias
    e_f = np.zeros((h, w, d_r), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            cat = [float(e_r[i, j, c]) for c in range(d_r)] + [
                float(e_g[i, j, c]) for c in range(d_r)
            ]
            for co in range(d_r):
                e_f[i, j, co] = (
                    sum(cat[ci] * float(cf_w[ci, co]) for ci in range(2 * d_r))
                    + float(cf_b[co])
                )
    return h_r, e_r, e_g, e_f


def naive_topk(values, k, aggregate="mean"):
    """Top-k of a flat list; ties resolved toward the smaller index."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    chosen = [values[i] for i in order[:k]]
    total = sum(chosen)
    return total / k if aggregate == "mean" else total


def naive_classify(e_f, w_a, attr_rows, k, aggregate="mean"):
    h, w, d_r = e_f.shape
    n_classes, d_a = attr_rows.shape
    m = np.zeros((h, w, n_classes), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            proj = [
                sum(float(e_f[i, j, c]) * float(w_a[c, a]) for c in range(d_r))
                for a in range(d_a)
            ]
            for cls in range(n_classes):
                m[i, j, cls] = sum(
                    proj[a] * float(attr_rows[cls, a]) for a in range(d_a)
                )
    scores = np.array(
        [
            naive_topk([float(v) for v in m[:, :, cls].ravel()], k, aggregate)
            for cls in range(n_classes)
        ],
        dtype=np.float64,
    )
    return m, scores


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------

def naive_average_precision(ranked_positive_flags):
    """AP of one ranking given positive/negative flags in rank order."""
    seen = 0
    total = 0.0
    positives = sum(1 for f in ranked_positive_flags if f)
    if positives == 0:
        return None
    for rank, flag in enumerate(ranked_positive_flags, start=1):
        if flag:
            seen += 1
            total += seen / rank
    return total / positives


def naive_map(scores, positive_sets):
    """mAP over classes with at least one positive; ties rank smaller image first."""
    n, c = scores.shape
    aps = {}
    for cls in range(c):
        order = sorted(range(n), key=lambda i: (-scores[i][cls], i))
        flags = [cls in positive_sets[i] for i in order]
        ap = naive_average_precision(flags)
        if ap is not None:
            aps[cls] = ap
    mean = sum(aps.values()) / len(aps) if aps else None
    return aps, mean


def naive_f1_at_k(scores, positive_sets, k):
    """Micro precision/recall/F1 of per-image top-k; ties pick smaller class."""
    n, c = scores.shape
    hits = 0
    total_pos = sum(len(p) for p in positive_sets)
    for i in range(n):
        order = sorted(range(c), key=lambda cls: (-scores[i][cls], cls))
        hits += sum(1 for cls in order[:k] if cls in positive_sets[i])
    precision = hits / (k * n)
    recall = hits / total_pos if total_pos else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return precision, recall, f1
