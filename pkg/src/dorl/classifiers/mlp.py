"""One-hidden-layer ReLU network with a softmax output, trained with AdamW."""
import numpy as np

from ..core.autograd import Tensor
from ..core.optim import OptimState, adamw_step
from ..core.params import ParamStore
from ..core.rng import stream
from .base import Classifier, one_hot, softmax_rows


class MLPClassifier(Classifier):
    """Mini-batch AdamW; stops when the epoch loss fails to improve by ``tol`` for ``patience`` epochs."""

    algorithm = "mlp"
    defaults = {"hidden": 100, "max_iter": 1000, "lr": 1e-3, "weight_decay": 1e-4,
                "batch_size": 200, "tol": 1e-4, "patience": 10}
    arrays = ("W1", "b1", "W2", "b2")

    def _fit(self, Z, y):
        n, d = Z.shape
        L, hdim = self.n_classes, self.hp["hidden"]
        rng = stream(self.seed, "mlp.init")
        store = ParamStore()
        for name, fan_in, fan_out in (("W1", d, hdim), ("W2", hdim, L)):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            store.add(name, Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        store.add("b1", Tensor(np.zeros(hdim)))
        store.add("b2", Tensor(np.zeros(L)))
        state = OptimState(lr=self.hp["lr"], weight_decay=self.hp["weight_decay"])
        Y = one_hot(y, L)
        bs = min(self.hp["batch_size"], n)
        best, stale = np.inf, 0
        self.loss_curve = []
        for epoch in range(self.hp["max_iter"]):
            order = stream(self.seed, "mlp.shuffle", epoch).permutation(n)
            total = 0.0
            for lo in range(0, n, bs):
                idx = order[lo:lo + bs]
                X, T = Z[idx], Y[idx]
                W1, b1, W2, b2 = (store[k].data for k in ("W1", "b1", "W2", "b2"))
                H = np.maximum(X @ W1 + b1, 0.0)
                P = softmax_rows(H @ W2 + b2)
                total += -np.sum(T * np.log(np.clip(P, 1e-300, None)))
                dO = (P - T) / len(idx)
                dH = (dO @ W2.T) * (H > 0)
                grads = {"W1": X.T @ dH, "b1": dH.sum(0), "W2": H.T @ dO, "b2": dO.sum(0)}
                adamw_step(store, grads, state)
            loss = total / n
            self.loss_curve.append(loss)
            if loss > best - self.hp["tol"]:
                stale += 1
                if stale >= self.hp["patience"]:
                    break
            else:
                stale = 0
            best = min(best, loss)
        for k in self.arrays:
            setattr(self, k, store[k].data)

    def _scores(self, Z):
        H = np.maximum(Z @ self.W1 + self.b1, 0.0)
        return softmax_rows(H @ self.W2 + self.b2)
