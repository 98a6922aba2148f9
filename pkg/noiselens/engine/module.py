"""Parameter containers shared by the generator, discriminator and task network."""
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from noiselens.engine.tensor import DTYPE, Tensor

INIT_STD = 0.02


class Module:
    """Owns named parameter tensors in a stable registration order."""

    def __init__(self):
        self._params = OrderedDict()

    def add_parameter(self, name, array):
        tensor = Tensor(np.asarray(array, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def normal_parameter(self, name, shape, rng, std=INIT_STD, mean=0.0):
        return self.add_parameter(name, rng.normal(mean, std, size=shape))

    def zeros_parameter(self, name, shape):
        return self.add_parameter(name, np.zeros(shape, dtype=DTYPE))

    def ones_parameter(self, name, shape):
        return self.add_parameter(name, np.ones(shape, dtype=DTYPE))

    def named_parameters(self):
        return list(self._params.items())

    def parameters(self):
        return list(self._params.values())

    def parameter(self, name):
        return self._params[name]

    def zero_grad(self):
        for param in self._params.values():
            param.zero_grad()

    def state_arrays(self):
        """Copy of every parameter array, keyed by name."""
        return OrderedDict((name, p.data.copy()) for name, p in self._params.items())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@contextmanager
def frozen(*modules):
    """Temporarily stop gradient tracking for every parameter of ``modules``."""
    saved = []
    for module in modules:
        for param in module.parameters():
            saved.append((param, param.requires_grad))
            param.requires_grad = False
    try:
        yield
    finally:
        for param, flag in saved:
            param.requires_grad = flag
