"""Common fit/predict contract, z-score standardisation and metrics."""
import warnings

import numpy as np

from ..errors import DataError, ShapeError


def check_features(X, y=None, n_classes=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ShapeError(f"features must be a non-empty [N, D] array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("features contain NaN or infinite values")
    if y is None:
        return X
    y = np.asarray(y)
    if y.shape != (len(X),):
        raise ShapeError(f"labels shape {y.shape} does not match {len(X)} samples")
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError("labels must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise DataError("labels must be >= 0")
    L = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if y.max() >= L:
        raise DataError(f"label {int(y.max())} >= class count {L}")
    return X, y, L


class Standardizer:
    """z-score with statistics from the training features; zero-variance columns pass through centred."""

    def __init__(self, mean=None, scale=None):
        self.mean, self.scale = mean, scale

    def fit(self, X):
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale = np.where(std > 1e-12 * np.maximum(1.0, np.abs(self.mean)), std, 1.0)
        return self

    def transform(self, X):
        return (X - self.mean) / self.scale


class Classifier:
    """fit(X, y) on raw features; scores(X) -> [N, L]; predict = argmax, ties to lowest id."""

    algorithm = ""
    defaults = {}

    def __init__(self, seed=0, **hp):
        unknown = set(hp) - set(self.defaults)
        if unknown:
            raise TypeError(f"{self.algorithm}: unknown hyperparameters {sorted(unknown)}")
        self.seed = seed
        self.hp = {**self.defaults, **hp}
        self.n_classes = None
        self.dim = None
        self.std = None
        self.degenerate = False

    def fit(self, X, y, n_classes=None):
        X, y, L = check_features(X, y, n_classes)
        self.n_classes, self.dim = L, X.shape[1]
        self.std = Standardizer().fit(X)
        Z = self.std.transform(X)
        present = np.unique(y)
        if len(present) == 1 and self.prior_on_single_class:
            warnings.warn(f"{self.algorithm}: single-class training data, fitting a prior model")
            self.degenerate = True
            self._prior = np.zeros(L)
            self._prior[present[0]] = 1.0
            return self
        self._fit(Z, y)
        return self

    prior_on_single_class = True

    def scores(self, X):
        if self.n_classes is None:
            raise DataError(f"{self.algorithm} model is not fitted")
        X = check_features(X)
        if X.shape[1] != self.dim:
            raise ShapeError(f"feature dim {X.shape[1]} != training dim {self.dim}")
        if self.degenerate:
            return np.tile(self._prior, (len(X), 1))
        return self._scores(self.std.transform(X))

    def predict(self, X):
        return predict_from_scores(self.scores(X))

    # persistence: subclasses list their array attributes
    arrays = ()

    def state(self):
        out = {"std.mean": self.std.mean, "std.scale": self.std.scale}
        if self.degenerate:
            out["prior"] = self._prior
        else:
            out.update({k: getattr(self, k) for k in self.arrays})
        return out

    def load_state(self, arrays):
        self.std = Standardizer(arrays["std.mean"], arrays["std.scale"])
        if "prior" in arrays:
            self.degenerate = True
            self._prior = arrays["prior"]
        else:
            for k in self.arrays:
                setattr(self, k, arrays[k])
        return self


def predict_from_scores(scores):
    """Row-wise argmax; ``np.argmax`` returns the first maximum, i.e. the lowest class id."""
    return np.argmax(np.asarray(scores), axis=1).astype(np.int64)


def top1_accuracy(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if len(pred) == 0:
        raise DataError("accuracy of an empty set is undefined")
    return float(np.mean(pred == truth))


def softmax_rows(F):
    F = F - F.max(axis=1, keepdims=True)
    E = np.exp(F)
    return E / E.sum(axis=1, keepdims=True)


def one_hot(y, L):
    Y = np.zeros((len(y), L))
    Y[np.arange(len(y)), y] = 1.0
    return Y
