"""Multinomial logistic regression and one-vs-rest SVMs (linear primal, poly dual)."""
import numpy as np

from ..core.rng import stream
from ..errors import ConfigError
from .base import Classifier, one_hot, softmax_rows

KERNEL_BUDGET_BYTES = 512 * 2 ** 20


class LogisticRegression(Classifier):
    """Softmax regression, full-batch gradient descent with Armijo backtracking.

    Objective: mean cross-entropy + ||W||^2 / (2 C N).
    """

    algorithm = "logreg"
    defaults = {"max_iter": 500, "C": 1.0, "tol": 1e-6}
    arrays = ("W", "b")

    def _objective(self, Z, Y, W, b, reg):
        P = softmax_rows(Z @ W + b)
        loss = -np.mean(np.sum(Y * np.log(np.clip(P, 1e-300, None)), axis=1)) + reg * np.sum(W * W)
        return loss, P

    def _fit(self, Z, y):
        n, d = Z.shape
        L = self.n_classes
        Y = one_hot(y, L)
        reg = 1.0 / (2.0 * self.hp["C"] * n)
        W, b = np.zeros((d, L)), np.zeros(L)
        loss, P = self._objective(Z, Y, W, b, reg)
        step = 1.0
        for _ in range(self.hp["max_iter"]):
            R = (P - Y) / n
            gW = Z.T @ R + 2.0 * reg * W
            gb = R.sum(axis=0)
            gnorm2 = np.sum(gW * gW) + np.sum(gb * gb)
            if gnorm2 < self.hp["tol"] ** 2:
                break
            step *= 2.0
            while True:
                W_new, b_new = W - step * gW, b - step * gb
                new_loss, P_new = self._objective(Z, Y, W_new, b_new, reg)
                if new_loss <= loss - 0.5 * step * gnorm2 or step < 1e-12:
                    break
                step *= 0.5
            W, b, loss, P = W_new, b_new, new_loss, P_new
        self.W, self.b = W, b

    def _scores(self, Z):
        return softmax_rows(Z @ self.W + self.b)


def _signs(y, L):
    return np.where(one_hot(y, L) > 0, 1.0, -1.0)


class LinearSVM(Classifier):
    """One-vs-rest hinge-loss SVM by mini-batch Pegasos on the primal.

    A constant feature carries the (regularised) bias; lambda = 1 / (C N).
    """

    algorithm = "svm_linear"
    defaults = {"C": 1.0, "max_iter": 2000, "batch_size": 128}
    arrays = ("W",)
    prior_on_single_class = True

    def _fit(self, Z, y):
        n, d = Z.shape
        L = self.n_classes
        Xa = np.hstack([Z, np.ones((n, 1))])
        S = _signs(y, L)                                  # [N, L]
        lam = 1.0 / (self.hp["C"] * n)
        k = min(self.hp["batch_size"], n)
        rng = stream(self.seed, "svm_linear.batches")
        W = np.zeros((d + 1, L))
        radius = 1.0 / np.sqrt(lam)
        for t in range(1, self.hp["max_iter"] + 1):
            idx = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
            Xb, Sb = Xa[idx], S[idx]
            viol = (Sb * (Xb @ W)) < 1.0
            eta = 1.0 / (lam * t)
            W *= 1.0 - eta * lam
            W += (eta / k) * (Xb.T @ (Sb * viol))
            norms = np.sqrt(np.sum(W * W, axis=0))
            W *= np.minimum(1.0, radius / np.maximum(norms, 1e-300))
        self.W = W

    def _scores(self, Z):
        return np.hstack([Z, np.ones((len(Z), 1))]) @ self.W


class PolySVM(Classifier):
    """One-vs-rest kernel SVM, K = (gamma x.x' + coef0)^degree, dual coordinate ascent.

    The bias is absorbed by adding 1 to the kernel.  gamma defaults to 1/D
    (features are standardised).
    """

    algorithm = "svm_poly"
    defaults = {"C": 1.0, "degree": 3, "coef0": 1.0, "gamma": None, "max_iter": 200, "tol": 1e-4}
    arrays = ("support", "coef", "gamma_")

    def _kernel(self, A, B):
        return (self.gamma_[0] * (A @ B.T) + self.hp["coef0"]) ** self.hp["degree"] + 1.0

    def _fit(self, Z, y):
        n, d = Z.shape
        if n * n * 8 > KERNEL_BUDGET_BYTES:
            raise ConfigError(f"poly kernel matrix for {n} samples exceeds the memory budget; "
                              "use the linear SVM for data this large")
        L = self.n_classes
        g = self.hp["gamma"]
        self.gamma_ = np.array([1.0 / d if g is None else float(g)])
        K = self._kernel(Z, Z)
        S = _signs(y, L)                                  # [N, L]
        C = self.hp["C"]
        alpha = np.zeros((n, L))
        F = np.zeros((n, L))                              # f_k(x_i) = sum_j alpha_jk s_jk K_ij
        diag = np.diag(K)
        rng = stream(self.seed, "svm_poly.order")
        for _ in range(self.hp["max_iter"]):
            biggest = 0.0
            for i in rng.permutation(n):
                grad = S[i] * F[i] - 1.0
                new = np.clip(alpha[i] - grad / diag[i], 0.0, C)
                delta = new - alpha[i]
                if np.any(delta):
                    alpha[i] = new
                    F += np.outer(K[:, i], delta * S[i])
                    biggest = max(biggest, float(np.max(np.abs(delta))))
            if biggest < self.hp["tol"]:
                break
        keep = np.any(alpha > 0, axis=1)
        self.support = Z[keep]
        self.coef = (alpha * S)[keep]

    def _scores(self, Z):
        if len(self.support) == 0:
            return np.zeros((len(Z), self.n_classes))
        return self._kernel(Z, self.support) @ self.coef
