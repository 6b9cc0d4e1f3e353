"""Small layer library built on the primitives in :mod:`ops`."""

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype


def parameter(data, name=None):
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad=True, name=name)


class Module:
    """Base class: tracks parameters and sub-modules in attribute order."""

    def named_parameters(self, prefix=""):
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + attr, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + attr + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ops.DimensionError(f"{name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.astype(get_dtype())

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))


class Dense(Module):
    """Fully connected layer with Glorot-uniform weights and zero bias."""

    def __init__(self, in_features, out_features, rng):
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.weight = parameter(rng.uniform(-limit, limit, size=(in_features, out_features)))
        self.bias = parameter(np.zeros(out_features))

    @property
    def in_features(self):
        return self.weight.shape[0]

    @property
    def out_features(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return ops.dense(x, self.weight, self.bias)


def _identity(x):
    return x


_ACTIVATIONS = {
    "relu": ops.relu,
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "linear": _identity,
}


def activation(name):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


class MLP(Module):
    """Stack of dense layers; ``hidden_activation`` between them, ``output_activation`` last."""

    def __init__(self, sizes, rng, hidden_activation="relu", output_activation="linear"):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        activation(hidden_activation), activation(output_activation)
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation

    def __call__(self, x):
        hidden = activation(self.hidden_activation)
        for layer in self.layers[:-1]:
            x = hidden(layer(x))
        return activation(self.output_activation)(self.layers[-1](x))
