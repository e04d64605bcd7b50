"""Classical classifiers over feature vectors behind one fit/predict contract."""
import csv
import json
from pathlib import Path

import numpy as np

from ..core.checkpoint import read_container, write_container
from ..errors import ConfigError, DataError
from .base import Classifier, Standardizer, predict_from_scores, top1_accuracy
from .kernels import BACKEND_NAME
from .linear import LinearSVM, LogisticRegression, PolySVM
from .mlp import MLPClassifier
from .trees import GradientBoosting, RandomForest

ALGORITHMS = {
    "rf": RandomForest,
    "gbt": GradientBoosting,
    "svm_poly": PolySVM,
    "svm_linear": LinearSVM,
    "logreg": LogisticRegression,
    "mlp": MLPClassifier,
}


def make(algorithm, seed=0, **hp):
    try:
        cls = ALGORITHMS[algorithm]
    except KeyError:
        raise ConfigError(f"unknown classifier '{algorithm}' "
                          f"(choose from {', '.join(ALGORITHMS)})") from None
    return cls(seed=seed, **hp)


def fit(algorithm, X, y, seed=0, n_classes=None, **hp):
    return make(algorithm, seed, **hp).fit(X, y, n_classes)


def predict(model, X):
    """(labels, per-class scores); ties resolve to the lowest class id."""
    scores = model.scores(X)
    return predict_from_scores(scores), scores


def save_model(path, model):
    meta = {"kind": "classifier", "algorithm": model.algorithm, "hyperparameters": model.hp,
            "seed": model.seed, "n_classes": model.n_classes, "dim": model.dim,
            "degenerate": model.degenerate}
    arrays = {k: np.asarray(v) for k, v in model.state().items()}
    return write_container(path, arrays, meta=json.loads(json.dumps(meta)))


def load_model(path):
    arrays, _, meta = read_container(path)
    if meta.get("kind") != "classifier":
        raise DataError(f"{path} is not a classifier checkpoint")
    model = make(meta["algorithm"], meta["seed"], **meta["hyperparameters"])
    model.n_classes, model.dim = meta["n_classes"], meta["dim"]
    return model.load_state(arrays)


def write_predictions(path, sample_ids, truth, pred, scores):
    """CSV: sample_id, true, predicted, score_0 .. score_{L-1}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "true", "predicted"] + [f"score_{k}" for k in range(scores.shape[1])])
        for sid, t, p, row in zip(sample_ids, truth, pred, scores):
            w.writerow([sid, int(t), int(p)] + [f"{v:.6g}" for v in row])
    return path


__all__ = ["ALGORITHMS", "BACKEND_NAME", "Classifier", "Standardizer", "make", "fit", "predict",
           "top1_accuracy", "save_model", "load_model", "write_predictions"]
