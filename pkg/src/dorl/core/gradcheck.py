"""Central finite-difference checks for the autograd ops."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import UnsupportedOpError
from . import autograd as ag
from .autograd import Tensor

REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: float
    max_abs_err: float
    per_input: dict = field(default_factory=dict)

    def passed(self, tol=1e-4):
        return self.max_rel_err <= tol


def _second(shape, rng, kind="same"):
    return rng.standard_normal(shape)


def _registry():
    # name -> (fn(*tensors), builder(rng, shape) -> list of arrays)
    def same(n):
        return lambda rng, s: [rng.standard_normal(s) for _ in range(n)]

    def positive(rng, s):
        return [rng.uniform(0.5, 2.0, s)]

    def matmul_inputs(rng, s):
        s = tuple(s)
        return [rng.standard_normal(s), rng.standard_normal((s[-1], 2))]

    def ln_inputs(rng, s):
        d = s[-1]
        return [rng.standard_normal(s), 1 + 0.1 * rng.standard_normal(d),
                0.1 * rng.standard_normal(d)]

    def ce_fn(rng, s):
        labels = rng.integers(0, s[-1], size=s[0])
        return lambda x: ag.cross_entropy(x, labels)

    def gather_fn(rng, s):
        idx = rng.integers(0, s[0], size=(max(1, s[0] - 1),))
        return lambda x: ag.gather(x, idx, axis=0)

    def scatter_fn(rng, s):
        idx = rng.permutation(s[0] + 2)[: s[0]]
        return lambda x: ag.scatter(x, idx, s[0] + 2, axis=0)

    def getitem_fn(rng, s):
        return lambda x: x[1:] if x.ndim == 1 else x[:, ::2]

    def reshape_fn(rng, s):
        return lambda x: ag.reshape(x, (-1,))

    def concat_fn(rng, s):
        return lambda x, y: ag.concat([x, y], axis=-1)

    def broadcast_fn(rng, s):
        return lambda x: ag.broadcast_to(x, (3,) + tuple(s))

    def fixed(f):
        return lambda rng, s: f

    return {
        "identity": (fixed(lambda x: x), same(1)),
        "add": (fixed(ag.add), same(2)),
        "sub": (fixed(ag.sub), same(2)),
        "mul": (fixed(ag.mul), same(2)),
        "div": (fixed(ag.div), lambda rng, s: [rng.standard_normal(s), rng.uniform(0.5, 2, s)]),
        "neg": (fixed(ag.neg), same(1)),
        "square": (fixed(ag.square), same(1)),
        "sqrt": (fixed(ag.sqrt), positive),
        "exp": (fixed(ag.exp), same(1)),
        "log": (fixed(ag.log), positive),
        "sigmoid": (fixed(ag.sigmoid), same(1)),
        "gelu": (fixed(ag.gelu), same(1)),
        "relu": (fixed(ag.relu), same(1)),
        "sum": (fixed(lambda x: ag.sum_(x, axis=-1)), same(1)),
        "mean": (fixed(lambda x: ag.mean(x, axis=-1)), same(1)),
        "variance": (fixed(lambda x: ag.variance(x, axis=-1)), same(1)),
        "matmul": (fixed(ag.matmul), matmul_inputs),
        "softmax": (fixed(ag.softmax), same(1)),
        "log_softmax": (fixed(ag.log_softmax), same(1)),
        "cross_entropy": (ce_fn, same(1)),
        "layer_norm": (fixed(ag.layer_norm), ln_inputs),
        "reshape": (reshape_fn, same(1)),
        "transpose": (fixed(ag.transpose), same(1)),
        "getitem": (getitem_fn, same(1)),
        "concat": (concat_fn, same(2)),
        "gather": (gather_fn, same(1)),
        "scatter": (scatter_fn, same(1)),
        "broadcast_to": (broadcast_fn, same(1)),
        "clip": (fixed(lambda x: ag.clip(x, -0.5, 0.5)),
                 lambda rng, s: [_away_from(rng.standard_normal(s), (-0.5, 0.5))]),
    }


def _away_from(x, points, margin=1e-3):
    for p in points:
        close = np.abs(x - p) < margin
        x[close] += 4 * margin
    return x


REGISTERED_OPS = tuple(_registry())


def numeric_grad(fn, arrays, weights, eps, which):
    """d/d(arrays[which]) of sum(fn(*arrays) * weights) by central differences."""
    base = arrays[which]
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = flat[i]
        plus = np.array(fn(*[Tensor(a) for a in arrays]).data)
        flat[i] = orig - eps
        down = flat[i]
        minus = np.array(fn(*[Tensor(a) for a in arrays]).data)
        flat[i] = orig
        step = up - down
        gflat[i] = np.sum(weights * ((plus - minus) / step))
    return grad


def check_function(fn, arrays, seed=0, eps=1e-5, name="fn", wrt=None):
    """Compare analytic and numeric gradients of ``fn`` at ``arrays`` (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    rng = np.random.default_rng(seed + 7919)
    with ag.no_grad():
        out = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(out.shape)

    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    out.backward(weights.astype(out.dtype))

    worst_rel = worst_abs = 0.0
    per_input = {}
    with ag.no_grad():
        for i in wrt:
            analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
            numeric = numeric_grad(fn, arrays, weights, eps, i)
            diff = np.abs(analytic - numeric)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
            rel = float((diff / denom).max()) if diff.size else 0.0
            per_input[i] = rel
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, float(diff.max()) if diff.size else 0.0)
    return GradCheckReport(name, worst_rel, worst_abs, per_input)


def grad_check(op, input_shape, seed=0, eps=1e-5):
    """Finite-difference check of a registered op at a random float64 input.

    ``op`` is a name from :data:`REGISTERED_OPS` or a callable taking one
    tensor.  ``eps`` must lie in [1e-7, 1e-3].
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    if callable(op):
        fn, arrays, name = op, [rng.standard_normal(tuple(input_shape))], getattr(op, "__name__", "fn")
    else:
        table = _registry()
        if op not in table:
            raise UnsupportedOpError(f"no registered gradient for op '{op}'")
        make_fn, make_inputs = table[op]
        arrays = make_inputs(rng, tuple(input_shape))
        fn, name = make_fn(rng, tuple(input_shape)), op
    return check_function(fn, arrays, seed=seed, eps=eps, name=name)
