"""Histogram-binned CART random forest and second-order gradient-boosted trees."""
import numpy as np

from ..core.rng import stream
from . import kernels
from .base import Classifier, one_hot, softmax_rows

MAX_BINS = 256


class Binner:
    """Per-feature cut points from training quantiles; codes fit in uint8."""

    def __init__(self, cuts=None, max_bins=MAX_BINS):
        self.cuts = cuts
        self.max_bins = max_bins

    def fit(self, X):
        qs = np.linspace(0.0, 1.0, self.max_bins + 1)[1:-1]
        self.cuts = []
        for col in X.T:
            uniq = np.unique(col)
            if len(uniq) <= self.max_bins:
                cuts = (uniq[:-1] + uniq[1:]) / 2.0
            else:
                cuts = np.unique(np.quantile(col, qs, method="midpoint"))
            self.cuts.append(cuts)
        return self

    def transform(self, X):
        out = np.empty(X.shape, dtype=np.uint8)
        for j, cuts in enumerate(self.cuts):
            out[:, j] = np.searchsorted(cuts, X[:, j], side="left")
        return np.ascontiguousarray(out)

    def pack(self):
        lengths = np.array([len(c) for c in self.cuts], dtype=np.int64)
        flat = np.concatenate(self.cuts) if self.cuts else np.zeros(0)
        return flat, lengths

    @classmethod
    def unpack(cls, flat, lengths):
        ends = np.cumsum(lengths)
        return cls([flat[e - n:e] for e, n in zip(ends, lengths)])


class _TreeArrays:
    """Growable node table; ``left = -1`` marks a leaf."""

    def __init__(self, value_dim):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        self.value_dim = value_dim

    def add(self):
        self.feature.append(-1)
        self.threshold.append(0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(np.zeros(self.value_dim))
        return len(self.feature) - 1

    def finish(self):
        return {"feature": np.array(self.feature, dtype=np.int64),
                "threshold": np.array(self.threshold, dtype=np.int64),
                "left": np.array(self.left, dtype=np.int64),
                "right": np.array(self.right, dtype=np.int64),
                "value": np.array(self.value, dtype=np.float64).reshape(len(self.value), -1)}


def _split(Xb, idx, f, b):
    go_left = Xb[idx, f] <= b
    return idx[go_left], idx[~go_left]


def grow_gini_tree(Xb, y, idx, n_classes, max_depth, mtry, rng, n_bins, min_leaf=1):
    t = _TreeArrays(n_classes)
    d = Xb.shape[1]
    stack = [(t.add(), np.asarray(idx, dtype=np.int64), 0)]
    while stack:
        node, rows, depth = stack.pop()
        counts = np.bincount(y[rows], minlength=n_classes)
        t.value[node] = counts / counts.sum()
        if depth >= max_depth or len(rows) < 2 * min_leaf or np.count_nonzero(counts) <= 1:
            continue
        feats = np.sort(rng.choice(d, size=min(mtry, d), replace=False)).astype(np.int64)
        _, f, b = kernels.gini_best_split(Xb, y, rows, feats, n_bins, n_classes, min_leaf)
        if f < 0:
            continue
        lrows, rrows = _split(Xb, rows, f, b)
        t.feature[node], t.threshold[node] = int(f), int(b)
        t.left[node], t.right[node] = t.add(), t.add()
        stack.append((t.right[node], rrows, depth + 1))
        stack.append((t.left[node], lrows, depth + 1))
    return t.finish()


def grow_newton_tree(Xb, g, h, idx, max_depth, lam, min_child_weight, n_bins, gamma=0.0):
    t = _TreeArrays(1)
    feats = np.arange(Xb.shape[1], dtype=np.int64)
    stack = [(t.add(), np.asarray(idx, dtype=np.int64), 0)]
    while stack:
        node, rows, depth = stack.pop()
        G, H = float(np.sum(g[rows])), float(np.sum(h[rows]))
        t.value[node] = np.array([-G / (H + lam)])
        if depth >= max_depth or len(rows) < 2:
            continue
        gain, f, b = kernels.newton_best_split(Xb, g, h, rows, feats, n_bins, G, H, lam,
                                               min_child_weight)
        if f < 0 or gain <= gamma:
            continue
        lrows, rrows = _split(Xb, rows, f, b)
        t.feature[node], t.threshold[node] = int(f), int(b)
        t.left[node], t.right[node] = t.add(), t.add()
        stack.append((t.right[node], rrows, depth + 1))
        stack.append((t.left[node], lrows, depth + 1))
    return t.finish()


def apply(tree, Xb):
    out = np.empty(len(Xb), dtype=np.int64)
    kernels.apply_tree(Xb, tree["feature"], tree["threshold"], tree["left"], tree["right"], out)
    return out


def _pack_trees(trees):
    sizes = np.array([len(t["feature"]) for t in trees], dtype=np.int64)
    packed = {k: np.concatenate([t[k] for t in trees]) for k in trees[0]}
    packed["sizes"] = sizes
    return packed


def _unpack_trees(packed):
    trees, start = [], 0
    for n in packed["sizes"]:
        trees.append({k: packed[k][start:start + n]
                      for k in ("feature", "threshold", "left", "right", "value")})
        start += n
    return trees


class _TreeModel(Classifier):
    arrays = ()

    def state(self):
        out = super().state()
        if not self.degenerate:
            flat, lengths = self.binner.pack()
            out["bins.cuts"], out["bins.lengths"] = flat, lengths
            for k, v in _pack_trees(self.trees).items():
                out[f"trees.{k}"] = v
            out.update(self._extra_state())
        return out

    def load_state(self, arrays):
        super().load_state(arrays)
        if not self.degenerate:
            self.binner = Binner.unpack(arrays["bins.cuts"], arrays["bins.lengths"])
            self.trees = _unpack_trees({k[6:]: v for k, v in arrays.items()
                                        if k.startswith("trees.")})
            self._load_extra(arrays)
        return self

    def _extra_state(self):
        return {}

    def _load_extra(self, arrays):
        pass


class RandomForest(_TreeModel):
    """Bootstrap-bagged Gini trees, sqrt(D) candidate features per split, probability vote."""

    algorithm = "rf"
    defaults = {"n_trees": 200, "max_depth": 16, "min_leaf": 1, "max_bins": MAX_BINS}
    prior_on_single_class = False

    def _fit(self, Z, y):
        n, d = Z.shape
        self.binner = Binner(max_bins=self.hp["max_bins"]).fit(Z)
        Xb = self.binner.transform(Z)
        mtry = max(1, int(np.sqrt(d)))
        self.trees = []
        for k in range(self.hp["n_trees"]):
            rng = stream(self.seed, "rf.tree", k)
            boot = np.sort(rng.integers(0, n, size=n))
            self.trees.append(grow_gini_tree(Xb, y, boot, self.n_classes, self.hp["max_depth"],
                                             mtry, rng, self.hp["max_bins"], self.hp["min_leaf"]))

    def _scores(self, Z):
        Xb = self.binner.transform(Z)
        votes = np.zeros((len(Z), self.n_classes))
        for tree in self.trees:
            votes += tree["value"][apply(tree, Xb)]
        return votes / len(self.trees)


class GradientBoosting(_TreeModel):
    """Softmax boosting: one Newton tree per class per round on (p - y, p(1 - p))."""

    algorithm = "gbt"
    defaults = {"n_rounds": 100, "max_depth": 6, "shrinkage": 0.3, "reg_lambda": 1.0,
                "min_child_weight": 1.0, "max_bins": MAX_BINS}
    prior_on_single_class = False

    def _fit(self, Z, y):
        n = len(Z)
        L = self.n_classes
        self.binner = Binner(max_bins=self.hp["max_bins"]).fit(Z)
        Xb = self.binner.transform(Z)
        prior = np.bincount(y, minlength=L) / n
        self.base = np.log(np.maximum(prior, 1e-12))
        F = np.tile(self.base, (n, 1))
        Y = one_hot(y, L)
        idx = np.arange(n, dtype=np.int64)
        self.trees = []
        self.loss_curve = [self._loss(F, Y)]
        eta = self.hp["shrinkage"]
        for _ in range(self.hp["n_rounds"]):
            P = softmax_rows(F)
            round_trees = []
            for k in range(L):
                g = np.ascontiguousarray(P[:, k] - Y[:, k])
                h = np.ascontiguousarray(np.maximum(P[:, k] * (1.0 - P[:, k]), 1e-16))
                tree = grow_newton_tree(Xb, g, h, idx, self.hp["max_depth"],
                                        self.hp["reg_lambda"], self.hp["min_child_weight"],
                                        self.hp["max_bins"])
                tree["value"] = tree["value"] * eta
                round_trees.append(tree)
            for k, tree in enumerate(round_trees):
                F[:, k] += tree["value"][apply(tree, Xb), 0]
            self.trees.extend(round_trees)
            self.loss_curve.append(self._loss(F, Y))

    @staticmethod
    def _loss(F, Y):
        P = softmax_rows(F)
        return float(-np.mean(np.sum(Y * np.log(np.clip(P, 1e-300, None)), axis=1)))

    def _raw(self, Z):
        Xb = self.binner.transform(Z)
        F = np.tile(self.base, (len(Z), 1))
        L = self.n_classes
        for j, tree in enumerate(self.trees):
            F[:, j % L] += tree["value"][apply(tree, Xb), 0]
        return F

    def _scores(self, Z):
        return softmax_rows(self._raw(Z))

    def _extra_state(self):
        return {"base": self.base}

    def _load_extra(self, arrays):
        self.base = arrays["base"]
