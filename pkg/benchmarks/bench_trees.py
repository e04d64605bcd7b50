"""Compare the compiled tree kernels with the numpy fallback.

    python benchmarks/bench_trees.py [--samples 2000] [--features 64] [--repeat 5]

Times the three kernels on identical inputs, checks that both backends return
the same split / leaf ids, then times a whole random forest and boosting fit
under each backend.
"""
import argparse
import importlib
import os
import time

import numpy as np


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_table(n, d, n_classes, repeat):
    from dorl.classifiers import _trees_py as py
    try:
        from dorl.classifiers import _trees as cy
    except ImportError:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation`")
        return False
    rng = np.random.default_rng(0)
    Xb = np.ascontiguousarray(rng.integers(0, 256, size=(n, d)).astype(np.uint8))
    y = rng.integers(0, n_classes, size=n).astype(np.int64)
    g = rng.normal(size=n)
    h = rng.uniform(0.05, 0.25, size=n)
    idx = np.sort(rng.choice(n, size=n * 3 // 4, replace=False)).astype(np.int64)
    feats = np.arange(d, dtype=np.int64)
    G, H = float(g[idx].sum()), float(h[idx].sum())
    feature = np.array([3, -1, 5, -1, -1], dtype=np.int64)
    thresh = np.array([100, 0, 40, 0, 0], dtype=np.int64)
    left = np.array([1, -1, 3, -1, -1], dtype=np.int64)
    right = np.array([2, -1, 4, -1, -1], dtype=np.int64)

    cases = {
        "gini_best_split": lambda m: m.gini_best_split(Xb, y, idx, feats, 256, n_classes, 1),
        "newton_best_split": lambda m: m.newton_best_split(Xb, g, h, idx, feats, 256, G, H, 1.0, 1.0),
        "apply_tree": lambda m: m.apply_tree(Xb, feature, thresh, left, right,
                                             np.empty(n, dtype=np.int64)),
    }
    print(f"{'kernel':<20}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  same result")
    for name, call in cases.items():
        if name == "apply_tree":
            a, b = np.empty(n, np.int64), np.empty(n, np.int64)
            py.apply_tree(Xb, feature, thresh, left, right, a)
            cy.apply_tree(Xb, feature, thresh, left, right, b)
            same = np.array_equal(a, b)
        else:
            same = tuple(call(py))[1:] == tuple(call(cy))[1:]
        t_py = _best(lambda: call(py), repeat)
        t_cy = _best(lambda: call(cy), repeat)
        print(f"{name:<20}{t_py * 1e3:>10.2f}{t_cy * 1e3:>11.3f}{t_py / t_cy:>8.1f}x  {same}")
    return True


def fit_table(n, d, n_classes):
    """Whole-model fits under each backend (module reloaded per backend)."""
    rng = np.random.default_rng(1)
    X = rng.normal(size=(n, d))
    y = (X[:, 0] + X[:, 1] * X[:, 2] > 0).astype(np.int64) + 2 * (X[:, 3] > 0.5)
    y %= n_classes
    rows = {}
    for backend in ("numpy", "cython"):
        os.environ["DORL_PURE_PYTHON"] = "1" if backend == "numpy" else "0"
        import dorl.classifiers.kernels as kernels
        import dorl.classifiers.trees as trees
        importlib.reload(kernels)
        importlib.reload(trees)
        if backend == "cython" and kernels.BACKEND_NAME != "cython":
            continue
        for label, model in (("rf (50 trees)", trees.RandomForest(n_trees=50)),
                             ("gbt (20 rounds)", trees.GradientBoosting(n_rounds=20))):
            t = time.perf_counter()
            model.fit(X, y, n_classes)
            elapsed = time.perf_counter() - t
            rows.setdefault(label, {})[backend] = (elapsed, model.scores(X))
    os.environ.pop("DORL_PURE_PYTHON", None)
    print(f"\n{'model':<18}{'numpy s':>9}{'cython s':>10}{'speedup':>9}  identical scores")
    for label, r in rows.items():
        if "cython" not in r:
            print(f"{label:<18}{r['numpy'][0]:>9.2f}{'-':>10}")
            continue
        same = np.array_equal(r["numpy"][1], r["cython"][1])
        print(f"{label:<18}{r['numpy'][0]:>9.2f}{r['cython'][0]:>10.2f}"
              f"{r['numpy'][0] / r['cython'][0]:>8.1f}x  {same}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--features", type=int, default=64)
    ap.add_argument("--classes", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernel_table(args.samples, args.features, args.classes, args.repeat):
        fit_table(args.samples // 2, min(args.features, 32), args.classes)


if __name__ == "__main__":
    main()
