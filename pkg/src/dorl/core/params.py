"""Named parameter storage with per-parameter freeze flags."""
import numpy as np

from .autograd import Tensor


class ParamStore:
    def __init__(self):
        self._params = {}
        self._frozen = {}

    def add(self, name, value, frozen=False):
        if name in self._params:
            raise KeyError(f"duplicate parameter name '{name}'")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value))
        t.name = name
        t.requires_grad = not frozen
        self._params[name] = t
        self._frozen[name] = bool(frozen)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix=""):
        return [n for n in self._params if n.startswith(prefix)]

    def is_frozen(self, name):
        return self._frozen[name]

    def freeze(self, name, frozen=True):
        self._frozen[name] = bool(frozen)
        self._params[name].requires_grad = not frozen

    def freeze_prefix(self, prefix, frozen=True):
        for n in self.names(prefix):
            self.freeze(n, frozen)

    def trainable(self):
        return [n for n in self._params if not self._frozen[n]]

    def frozen(self):
        return [n for n in self._params if self._frozen[n]]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self):
        """Gradients of every trainable parameter, zeros where none flowed."""
        return {n: (self._params[n].grad if self._params[n].grad is not None
                    else np.zeros_like(self._params[n].data))
                for n in self.trainable()}

    def snapshot(self, names=None):
        names = self._params if names is None else names
        return {n: self._params[n].data.copy() for n in names}

    def astype(self, dtype):
        for t in self._params.values():
            t.data = t.data.astype(dtype)
        return self

    def update(self, other, prefix=""):
        """Copy every parameter of ``other`` in, optionally renamed with ``prefix``."""
        for name, t in other.items():
            self.add(prefix + name, Tensor(t.data.copy()), frozen=other.is_frozen(name))
        return self

    def subset(self, prefix):
        out = ParamStore()
        for n in self.names(prefix):
            out._params[n] = self._params[n]
            out._frozen[n] = self._frozen[n]
        return out
