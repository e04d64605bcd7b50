"""Numpy fallback for the compiled tree kernels (same signatures, same results)."""
import numpy as np


def gini_best_split(Xb, y, idx, features, n_bins, n_classes, min_leaf):
    n = len(idx)
    yi = y[idx]
    total = np.bincount(yi, minlength=n_classes).astype(np.int64)
    best, best_f, best_b = -np.inf, -1, -1
    for f in features:
        codes = Xb[idx, f].astype(np.int64) * n_classes + yi
        hist = np.bincount(codes, minlength=n_bins * n_classes).reshape(n_bins, n_classes)
        left = np.cumsum(hist, axis=0)[:-1]
        nl = left.sum(axis=1)
        nr = n - nl
        sl = (left * left).sum(axis=1)
        right = total - left
        sr = (right * right).sum(axis=1)
        ok = (nl >= min_leaf) & (nr >= min_leaf)
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            score = sl.astype(np.float64) / nl.astype(np.float64) + \
                sr.astype(np.float64) / nr.astype(np.float64)
        score = np.where(ok, score, -np.inf)
        b = int(np.argmax(score))
        if score[b] > best:
            best, best_f, best_b = float(score[b]), int(f), b
    return best, best_f, best_b


def newton_best_split(Xb, g, h, idx, features, n_bins, G, H, lam, min_child_weight):
    gi, hi = g[idx], h[idx]
    parent = G * G / (H + lam)
    best, best_f, best_b = -np.inf, -1, -1
    for f in features:
        xb = Xb[idx, f]
        GL = np.cumsum(np.bincount(xb, weights=gi, minlength=n_bins))[:-1]
        HL = np.cumsum(np.bincount(xb, weights=hi, minlength=n_bins))[:-1]
        GR = G - GL
        HR = H - HL
        ok = (HL >= min_child_weight) & (HR >= min_child_weight)
        if not ok.any():
            continue
        gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
        gain = np.where(ok, gain, -np.inf)
        b = int(np.argmax(gain))
        if gain[b] > best:
            best, best_f, best_b = float(gain[b]), int(f), b
    return best, best_f, best_b


def apply_tree(Xb, feature, threshold, left, right, out):
    node = np.zeros(len(Xb), dtype=np.int64)
    rows = np.arange(len(Xb))
    active = left[node] >= 0
    while active.any():
        r, nd = rows[active], node[active]
        go_left = Xb[r, feature[nd]] <= threshold[nd]
        node[r] = np.where(go_left, left[nd], right[nd])
        active = left[node] >= 0
    out[:] = node
