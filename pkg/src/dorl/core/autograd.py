"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray.  Every op in this module computes its
forward value eagerly and, when gradients are enabled and some input requires
them, records a closure that maps the upstream gradient to input gradients.
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.

Shapes are validated before any arithmetic runs, and every forward result is
checked for NaN/Inf (raising :class:`NumericError` naming the op) unless the
check is switched off with :func:`finite_checks`.
"""
from contextlib import contextmanager
from collections import defaultdict

import numpy as np

from ..errors import NumericError, ShapeError

_state = {"grad": True, "check_finite": True, "counter": None}


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextmanager
def finite_checks(enabled):
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


class OpCounter:
    """Tallies op invocations and floating-point work while active.

    ``flops`` counts multiply-adds for matmul and output elements for the
    rest, which is enough to show how compute scales with token count.
    """

    def __init__(self):
        self.calls = defaultdict(int)
        self.flops = defaultdict(int)

    @property
    def total_flops(self):
        return sum(self.flops.values())

    def record(self, op, flops):
        self.calls[op] += 1
        self.flops[op] += int(flops)


@contextmanager
def count_ops():
    prev = _state["counter"]
    counter = OpCounter()
    _state["counter"] = counter
    try:
        yield counter
    finally:
        _state["counter"] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None, retain_graph=False):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topo_order(self)
        grads = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._backward = None
                node._parents = ()


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _lift(a, b):
    """Coerce a pair of operands, keeping the dtype of whichever is a Tensor."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _result(data, op, parents, backward, flops=None):
    counter = _state["counter"]
    if counter is not None:
        counter.record(op, data.size if flops is None else flops)
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NumericError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def custom_op(data, op, parents, backward, flops=None):
    """Register a hand-written op: ``backward(g)`` returns one gradient (or None) per parent."""
    return _result(np.asarray(data), op, tuple(parents), backward, flops)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    nd = grad.ndim - len(shape)
    if nd > 0:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {shapes} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _lift(a, b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a, b):
    a, b = _lift(a, b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a, b):
    a, b = _lift(a, b)
    _broadcast_shape("mul", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), backward)


def div(a, b):
    a, b = _lift(a, b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), backward)


def neg(a):
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def square(a):
    def backward(g):
        return (2.0 * g * a.data,)

    return _result(a.data * a.data, "square", (a,), backward)


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _result(out, "sqrt", (a,), backward)


def exp(a):
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def clip(a, lo, hi):
    out = np.clip(a.data, lo, hi)

    def backward(g):
        inside = (a.data >= lo) & (a.data <= hi)
        return (g * inside,)

    return _result(out, "clip", (a,), backward)


def sigmoid(a):
    # 0.5 * (1 + tanh(x / 2)) never overflows and needs a single transcendental
    out = np.tanh(a.data * 0.5)
    out += 1.0
    out *= 0.5
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, "relu", (a,), lambda g: (g * mask,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def backward(g):
        dinner = x2 * (3 * 0.044715 * _GELU_C)
        dinner += _GELU_C
        dt = t * t
        np.subtract(1.0, dt, out=dt)
        dt *= x
        dt *= dinner
        dt += t
        dt += 1.0
        dt *= 0.5
        return (g * dt,)

    return _result(out, "gelu", (a,), backward)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    return _result(out, "sum", (a,), backward, flops=a.size)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    return _result(out, "mean", (a,), backward, flops=a.size)


def variance(a, axis=None, keepdims=False):
    """Population variance (divides by the element count)."""
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape) * (2.0 / count) * centered,)

    out = np.asarray((centered * centered).mean(axis=axes, keepdims=keepdims))
    return _result(out, "variance", (a,), backward, flops=a.size)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one large GEMM instead of a loop of small ones
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data
    flops = out.size * a.shape[-1]

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), backward, flops=flops)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` laid out as [out, in]."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalisation

def softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), backward)


def log_softmax(a, axis=-1):
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (a,), backward)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    x = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _result(out, "cross_entropy", (logits,), backward, flops=logits.size)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, "layer_norm", (x, gamma, beta), backward, flops=x.size * 8)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _result(out, "reshape", (a,), lambda g: (g.reshape(src),), flops=0)


def transpose(a, axes=None):
    if axes is None:
        # default swaps the two trailing axes
        axes = tuple(range(a.ndim))
        if a.ndim >= 2:
            axes = axes[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,),
                   lambda g: (g.transpose(inv),), flops=0)


def _is_basic_index(key):
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice))
               for k in keys)


def getitem(a, key):
    out = a.data[key]
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(key)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out), "getitem", (a,), backward, flops=0)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, "concat", tuple(tensors), backward, flops=0)


def gather(a, index, axis, unique=False):
    """``np.take_along_axis`` along ``axis``; ``index`` broadcasts over trailing dims.

    ``unique=True`` promises no index repeats within a slice, which lets the
    backward pass assign instead of accumulate.
    """
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    if index.ndim < a.ndim:
        index = index.reshape(index.shape + (1,) * (a.ndim - index.ndim))
    if index.size and (index.min() < 0 or index.max() >= a.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis of size {a.shape[axis]}")
    full_index = np.broadcast_to(
        index, tuple(index.shape[i] if i == axis else a.shape[i] for i in range(a.ndim)))
    out = np.take_along_axis(a.data, full_index, axis=axis)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        grad = np.zeros(shape, dtype=dtype)
        if unique:
            np.put_along_axis(grad, full_index, g, axis=axis)
        else:
            _scatter_add(grad, full_index, g, axis)
        return (grad,)

    return _result(out, "gather", (a,), backward, flops=0)


def scatter(a, index, size, axis):
    """Place slices of ``a`` at positions ``index`` of a zero tensor of length ``size``."""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    if index.ndim < a.ndim:
        index = index.reshape(index.shape + (1,) * (a.ndim - index.ndim))
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError(f"scatter: index out of range for target size {size}")
    full_index = np.broadcast_to(index, a.shape)
    out_shape = tuple(size if i == axis else s for i, s in enumerate(a.shape))
    out = np.zeros(out_shape, dtype=a.dtype)
    _scatter_add(out, full_index, a.data, axis)

    def backward(g):
        return (np.take_along_axis(g, full_index, axis=axis),)

    return _result(out, "scatter", (a,), backward, flops=0)


def _scatter_add(target, index, values, axis):
    grids = list(np.meshgrid(*[np.arange(s) for s in index.shape], indexing="ij"))
    grids[axis] = index
    np.add.at(target, tuple(grids), values)


def broadcast_to(a, shape):
    shape = tuple(shape)
    _broadcast_shape("broadcast_to", a.shape, shape)
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, src),), flops=0)


def forward_backward(fn, inputs):
    """Evaluate ``fn(**inputs)`` (or ``fn(*inputs)``) and differentiate it.

    Returns ``(value, grads)`` where ``grads`` maps each input key (name or
    position) that requires grad to d(value)/d(input).  ``value`` must be a
    scalar tensor.
    """
    named = isinstance(inputs, dict)
    items = list(inputs.items()) if named else list(enumerate(inputs))
    for _, t in items:
        t.grad = None
    value = fn(**inputs) if named else fn(*inputs)
    if value.requires_grad:
        value.backward()
    grads = {}
    for key, t in items:
        if t.requires_grad:
            grads[key] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return value, grads
