"""Invertible links from flat latent vectors to constrained event spaces.

Every bijector maps (..., in_size or in_shape) -> (..., out_shape) over
trailing axes, and reports log|det J| per batch entry, with non-square
embeddings (the simplex maps) using 0.5 * logdet(J^T J).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor, as_tensor


class Identity:
    def __init__(self, size: int):
        self.size = int(size)
        self.latent_size = self.size
        self.event_shape = (self.size,)

    def forward(self, x) -> Tensor:
        return as_tensor(x)

    def inverse(self, y) -> Tensor:
        return as_tensor(y)

    def forward_log_det_jacobian(self, x) -> Tensor:
        x = as_tensor(x)
        return T.reduce_sum(x * 0.0, axis=-1)

    def inverse_log_det_jacobian(self, y) -> Tensor:
        return self.forward_log_det_jacobian(y)

    def describe(self) -> str:
        return "Identity"


class Reshape:
    """Pure view change (..., S) <-> (..., *event_shape)."""

    def __init__(self, event_shape: tuple[int, ...]):
        self.event_shape = tuple(int(n) for n in event_shape)
        self.latent_size = int(np.prod(self.event_shape))

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.latent_size:
            raise ConfigError(f"Reshape: expected last axis {self.latent_size}, got {x.shape}")
        return T.reshape(x, x.shape[:-1] + self.event_shape)

    def inverse(self, y) -> Tensor:
        y = as_tensor(y)
        nev = len(self.event_shape)
        if y.shape[y.ndim - nev:] != self.event_shape:
            raise ConfigError(f"Reshape: expected trailing {self.event_shape}, got {y.shape}")
        return T.reshape(y, y.shape[:y.ndim - nev] + (self.latent_size,))

    def forward_log_det_jacobian(self, x) -> Tensor:
        x = as_tensor(x)
        return T.reduce_sum(x * 0.0, axis=-1)

    def inverse_log_det_jacobian(self, y) -> Tensor:
        y = as_tensor(y)
        return T.reduce_sum(y * 0.0, axis=tuple(range(-len(self.event_shape), 0)))

    def describe(self) -> str:
        return f"Reshape(({self.latent_size},) -> {self.event_shape})"


class Exp:
    """Elementwise exp over an event of the given shape."""

    def __init__(self, event_shape: tuple[int, ...]):
        self.event_shape = tuple(int(n) for n in event_shape)
        self.latent_size = int(np.prod(self.event_shape))
        self._axes = tuple(range(-len(self.event_shape), 0))

    def forward(self, x) -> Tensor:
        return T.exp(x)

    def inverse(self, y) -> Tensor:
        return T.log(y)

    def forward_log_det_jacobian(self, x) -> Tensor:
        return T.reduce_sum(x, axis=self._axes)

    def inverse_log_det_jacobian(self, y) -> Tensor:
        return -T.reduce_sum(T.log(y), axis=self._axes)

    def describe(self) -> str:
        return f"Exp({self.event_shape} -> {self.event_shape})"


class SoftmaxCentered:
    """Appends a zero logit and applies softmax on the last axis, mapping
    (..., rows, L-1) onto the interior of the L-simplex, (..., rows, L)."""

    def __init__(self, event_shape: tuple[int, ...]):
        self.event_shape = tuple(int(n) for n in event_shape)
        self.n = self.event_shape[-1]
        if self.n < 2:
            raise ConfigError("SoftmaxCentered needs a last axis of at least 2")
        self.latent_size = int(np.prod(self.event_shape[:-1], initial=1)) * (self.n - 1)
        # axes where the per-row log-det lands once the last axis is consumed
        self._row_axes = tuple(range(-(len(self.event_shape) - 1), 0))

    def _in_shape_ok(self, x: Tensor) -> None:
        nev = len(self.event_shape)
        expect = self.event_shape[:-1] + (self.n - 1,)
        if tuple(x.shape[x.ndim - nev:]) != expect:
            raise ConfigError(f"SoftmaxCentered: expected trailing {expect}, got {x.shape}")

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        self._in_shape_ok(x)
        zeros = Tensor(np.zeros(x.shape[:-1] + (1,)))
        return T.softmax(T.concat([x, zeros], axis=-1), axis=-1)

    def inverse(self, y) -> Tensor:
        y = as_tensor(y)
        log_y = T.log(y)  # boundary values raise a domain error here
        head = T.narrow(log_y, -1, 0, self.n - 1)
        last = T.narrow(log_y, -1, self.n - 1, 1)
        return head - last

    def forward_log_det_jacobian(self, x) -> Tensor:
        x = as_tensor(x)
        self._in_shape_ok(x)
        # 0.5 log L + sum(x) - L * log(1 + sum exp(x)), the Gram factor of the
        # simplex embedding
        log_z = T.softplus(T.logsumexp(x, axis=-1))
        per_row = 0.5 * math.log(self.n) + T.reduce_sum(x, axis=-1) - self.n * log_z
        if self._row_axes:
            per_row = T.reduce_sum(per_row, axis=self._row_axes)
        return per_row

    def inverse_log_det_jacobian(self, y) -> Tensor:
        y = as_tensor(y)
        per_row = -(0.5 * math.log(self.n) + T.reduce_sum(T.log(y), axis=-1))
        if self._row_axes:
            per_row = T.reduce_sum(per_row, axis=self._row_axes)
        return per_row

    def describe(self) -> str:
        tail = self.event_shape[:-1]
        return f"SoftmaxCentered({tail + (self.n - 1,)} -> {self.event_shape})"


class SqrtSoftmaxCentered:
    """SoftmaxCentered followed by elementwise square root: latents land on
    the positive orthant of the unit sphere."""

    def __init__(self, event_shape: tuple[int, ...]):
        self._sc = SoftmaxCentered(event_shape)
        self.event_shape = self._sc.event_shape
        self.n = self._sc.n
        self.latent_size = self._sc.latent_size
        self._row_axes = self._sc._row_axes

    def forward(self, x) -> Tensor:
        return T.sqrt(self._sc.forward(x))

    def inverse(self, z) -> Tensor:
        z = as_tensor(z)
        return self._sc.inverse(z * z)

    def forward_log_det_jacobian(self, x) -> Tensor:
        # Gram determinant of the composed embedding: sum(log z) - (L-1) log 2
        z = self.forward(x)
        per_row = T.reduce_sum(T.log(z), axis=-1) - (self.n - 1) * math.log(2.0)
        if self._row_axes:
            per_row = T.reduce_sum(per_row, axis=self._row_axes)
        return per_row

    def inverse_log_det_jacobian(self, z) -> Tensor:
        z = as_tensor(z)
        per_row = (self.n - 1) * math.log(2.0) - T.reduce_sum(T.log(z), axis=-1)
        if self._row_axes:
            per_row = T.reduce_sum(per_row, axis=self._row_axes)
        return per_row

    def describe(self) -> str:
        tail = self.event_shape[:-1]
        return f"SqrtSoftmaxCentered({tail + (self.n - 1,)} -> {self.event_shape})"


class Chain:
    """Composition; parts apply in declaration order on forward."""

    def __init__(self, parts: list):
        if not parts:
            raise ConfigError("Chain needs at least one bijector")
        self.parts = list(parts)
        self.latent_size = self.parts[0].latent_size
        self.event_shape = self.parts[-1].event_shape

    def forward(self, x) -> Tensor:
        y = as_tensor(x)
        for p in self.parts:
            y = p.forward(y)
        return y

    def inverse(self, y) -> Tensor:
        x = as_tensor(y)
        for p in reversed(self.parts):
            x = p.inverse(x)
        return x

    def forward_log_det_jacobian(self, x) -> Tensor:
        x = as_tensor(x)
        total = None
        for p in self.parts:
            ld = p.forward_log_det_jacobian(x)
            total = ld if total is None else total + ld
            x = p.forward(x)
        return total

    def inverse_log_det_jacobian(self, y) -> Tensor:
        y = as_tensor(y)
        total = None
        for p in reversed(self.parts):
            ld = p.inverse_log_det_jacobian(y)
            total = ld if total is None else total + ld
            y = p.inverse(y)
        return total

    def describe(self) -> str:
        return " o ".join(p.describe() for p in reversed(self.parts))


LINK_KINDS = ("identity", "reshape", "exp", "softmax_centered", "sqrt_softmax_centered")


def link_for(kind: str, event_shape: tuple[int, ...]):
    """Build the link mapping a flat latent vector onto `event_shape`."""
    event_shape = tuple(int(n) for n in event_shape)
    rank = len(event_shape)
    if kind == "identity":
        if rank != 1:
            return Reshape(event_shape)
        return Identity(event_shape[0])
    if kind == "reshape":
        return Reshape(event_shape)
    if kind == "exp":
        if rank == 1:
            return Exp(event_shape)
        return Chain([Reshape(event_shape), Exp(event_shape)])
    if kind in ("softmax_centered", "sqrt_softmax_centered"):
        cls = SoftmaxCentered if kind == "softmax_centered" else SqrtSoftmaxCentered
        base = cls(event_shape)
        if rank == 1:
            return base
        flat_in = event_shape[:-1] + (event_shape[-1] - 1,)
        return Chain([Reshape(flat_in), base])
    raise ConfigError(f"unknown link kind '{kind}' (expected one of {LINK_KINDS})")
