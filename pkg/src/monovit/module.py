"""Tiny layer/parameter registry shared by the networks.

A Module is anything that owns Parameters (directly or through child
Modules).  Parameter discovery walks ``__dict__`` recursively, so layers
compose by plain attribute assignment; lists of children go through
ModuleList.
"""

import numpy as np

from .autodiff import Tensor


class Parameter(Tensor):
    """A Tensor that is trainable by default and shows up in named_parameters."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def named_parameters(self, prefix=""):
        """Yield (dotted_name, Parameter) pairs in deterministic attribute order."""
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


class ModuleList(Module):
    """Sequence of child modules registered under their index."""

    def __init__(self, mods=()):
        for i, m in enumerate(mods):
            setattr(self, str(i), m)
        self._n = len(tuple(mods))

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        return getattr(self, str(i % self._n if self._n else 0))

    def named_parameters(self, prefix=""):
        for i in range(self._n):
            yield from getattr(self, str(i)).named_parameters(f"{prefix}{i}.")


def fan_in_conv(rng, c_out, c_in, kh, kw):
    """Fan-in scaled uniform init, U(±sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / (c_in * kh * kw))
    return Parameter(rng.uniform(-bound, bound, size=(c_out, c_in, kh, kw)))


def fan_in_linear(rng, n_out, n_in):
    bound = np.sqrt(6.0 / n_in)
    return Parameter(rng.uniform(-bound, bound, size=(n_out, n_in)))


def zeros_param(*shape):
    return Parameter(np.zeros(shape))


def ones_param(*shape):
    return Parameter(np.ones(shape))
