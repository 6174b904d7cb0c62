"""Parameter containers shared by the encoder, BC and delta-dynamics heads."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """A named, ordered bag of parameter tensors."""

    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.params.items():
            arr = np.asarray(arrays[prefix + k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{prefix + k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


class MLP(Module):
    """Fully connected stack with Mish between layers and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigError(f"bad layer sizes {list(sizes)}")
        self.sizes = tuple(int(s) for s in sizes)
        self.params = {}
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"l{i}.w"] = fan_in_uniform(rng, (n_in, n_out), n_in)
            self.params[f"l{i}.b"] = fan_in_uniform(rng, (n_out,), n_in)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def __call__(self, x) -> Tensor:
        h = T.as_tensor(x)
        if h.shape[-1] != self.in_dim:
            raise ShapeError(f"MLP expects last dim {self.in_dim}, got {h.shape}")
        n = len(self.sizes) - 1
        for i in range(n):
            h = h @ self.params[f"l{i}.w"] + self.params[f"l{i}.b"]
            if i < n - 1:
                h = T.mish(h)
        return h
