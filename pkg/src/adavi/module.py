"""Minimal parameter-container base plus the two layers everything reuses."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Anything holding trainable Tensors; discovers them from attributes."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            name = prefix + key
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{name}.{k}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{k}", item))
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def num_params(self) -> int:
        return sum(t.size for t in self.params())


class Linear(Module):
    """Dense layer x @ W + b with Glorot-uniform init (or zeros)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            bound = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    """Last-axis layer normalization with learned scale and shift."""

    EPS = 1e-6

    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x) -> Tensor:
        mu = T.reduce_mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.reduce_mean(centered * centered, axis=-1, keepdims=True)
        normed = centered / T.sqrt(var + self.EPS)
        return normed * self.gamma + self.beta
