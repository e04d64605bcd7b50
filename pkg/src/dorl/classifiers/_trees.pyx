# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled split-search and traversal kernels for the histogram trees.

Arithmetic order matches ``_trees_py`` exactly so both back ends choose the
same splits.
"""
from libc.stdlib cimport calloc, free
from libc.math cimport INFINITY


def gini_best_split(const unsigned char[:, ::1] Xb, const long long[::1] y,
                    const long long[::1] idx, const long long[::1] features,
                    int n_bins, int n_classes, int min_leaf):
    """Best (score, feature, bin) maximising sum(cl^2)/nl + sum(cr^2)/nr."""
    cdef Py_ssize_t n = idx.shape[0], nf = features.shape[0]
    cdef Py_ssize_t i, j, b, k, f
    cdef long long nl, nr, sl, sr, c
    cdef double score, best = -INFINITY
    cdef long long best_f = -1, best_b = -1
    cdef long long *hist = <long long *> calloc(n_bins * n_classes, sizeof(long long))
    cdef long long *total = <long long *> calloc(n_classes, sizeof(long long))
    cdef long long *left = <long long *> calloc(n_classes, sizeof(long long))
    if hist == NULL or total == NULL or left == NULL:
        free(hist); free(total); free(left)
        raise MemoryError()
    try:
        for i in range(n):
            total[y[idx[i]]] += 1
        for j in range(nf):
            f = features[j]
            for b in range(n_bins * n_classes):
                hist[b] = 0
            for k in range(n_classes):
                left[k] = 0
            for i in range(n):
                hist[Xb[idx[i], f] * n_classes + y[idx[i]]] += 1
            nl = 0
            for b in range(n_bins - 1):
                sl = 0
                sr = 0
                for k in range(n_classes):
                    left[k] += hist[b * n_classes + k]
                    nl += hist[b * n_classes + k]
                nr = n - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                for k in range(n_classes):
                    sl += left[k] * left[k]
                    c = total[k] - left[k]
                    sr += c * c
                score = (<double> sl) / (<double> nl) + (<double> sr) / (<double> nr)
                if score > best:
                    best = score
                    best_f = f
                    best_b = b
    finally:
        free(hist); free(total); free(left)
    return best, best_f, best_b


def newton_best_split(const unsigned char[:, ::1] Xb, const double[::1] g, const double[::1] h,
                      const long long[::1] idx, const long long[::1] features, int n_bins,
                      double G, double H, double lam, double min_child_weight):
    """Best (gain, feature, bin) of the second-order split gain."""
    cdef Py_ssize_t n = idx.shape[0], nf = features.shape[0]
    cdef Py_ssize_t i, j, b, f
    cdef double GL, HL, GR, HR, gain, best = -INFINITY
    cdef double parent = G * G / (H + lam)
    cdef long long best_f = -1, best_b = -1
    cdef double *hg = <double *> calloc(n_bins, sizeof(double))
    cdef double *hh = <double *> calloc(n_bins, sizeof(double))
    if hg == NULL or hh == NULL:
        free(hg); free(hh)
        raise MemoryError()
    try:
        for j in range(nf):
            f = features[j]
            for b in range(n_bins):
                hg[b] = 0.0
                hh[b] = 0.0
            for i in range(n):
                b = Xb[idx[i], f]
                hg[b] += g[idx[i]]
                hh[b] += h[idx[i]]
            GL = 0.0
            HL = 0.0
            for b in range(n_bins - 1):
                GL += hg[b]
                HL += hh[b]
                GR = G - GL
                HR = H - HL
                if HL < min_child_weight or HR < min_child_weight:
                    continue
                gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
                if gain > best:
                    best = gain
                    best_f = f
                    best_b = b
    finally:
        free(hg); free(hh)
    return best, best_f, best_b


def apply_tree(const unsigned char[:, ::1] Xb, const long long[::1] feature,
               const long long[::1] threshold, const long long[::1] left,
               const long long[::1] right, long long[::1] out):
    """Leaf index reached by every row of ``Xb``."""
    cdef Py_ssize_t i, n = Xb.shape[0]
    cdef long long node
    for i in range(n):
        node = 0
        while left[node] >= 0:
            if Xb[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
