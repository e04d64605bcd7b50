"""Stratified hold-out split and stratified k-fold partitions."""
import numpy as np

from ..core.rng import stream
from ..errors import StratificationError


def _labels(dataset):
    return np.asarray(dataset.labels if hasattr(dataset, "labels") else dataset)


def _class_name(dataset, c):
    names = getattr(dataset, "class_names", None)
    return names[c] if names is not None and 0 <= c < len(names) else str(c)


def stratified_split(dataset, test_fraction=0.2, seed=0):
    """Return (train_idx, test_idx), both sorted.

    Each class contributes round(test_fraction * n_c) test samples (at least
    one, and never all of them), so per-class proportions hold to one sample.
    """
    y = _labels(dataset)
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < 2:
            raise StratificationError(
                f"class '{_class_name(dataset, int(c))}' has {len(idx)} sample; need >= 2 to split")
        k = int(np.clip(np.floor(test_fraction * len(idx) + 0.5), 1, len(idx) - 1))
        perm = stream(seed, "split.holdout", int(c)).permutation(idx)
        test.append(perm[:k])
        train.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def stratified_kfold(dataset, k=5, seed=0):
    """k (train_idx, val_idx) pairs whose validation parts partition the data.

    Samples of each class are shuffled and dealt round-robin, starting at a
    rotating fold offset so fold sizes stay within one of each other overall.
    """
    y = _labels(dataset)
    fold_of = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < k:
            raise StratificationError(
                f"class '{_class_name(dataset, int(c))}' has {len(idx)} samples; need >= {k} for {k}-fold")
        perm = stream(seed, "split.kfold", int(c)).permutation(idx)
        fold_of[perm] = (np.arange(len(perm)) + offset) % k
        offset = (offset + len(perm)) % k
    out = []
    for f in range(k):
        val = np.flatnonzero(fold_of == f)
        tr = np.flatnonzero(fold_of != f)
        out.append((tr, val))
    return out
