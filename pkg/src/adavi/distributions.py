"""Probability distributions over Tensors.

log_prob is differentiable with respect to both the value and any Tensor
parameters.  Values outside the support yield -inf rather than an exception,
so mixtures and joint densities degrade gracefully.  Sampling returns plain
ndarrays; only Normal exposes the noise-first reparameterized form needed for
pathwise gradients.

Shape conventions: Normal, Gamma, Laplace and Uniform are elementwise.
DiagNormal, Dirichlet and Mixture consume the last (event) axis and return
one value per event.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor, as_tensor

LOG_2PI = math.log(2.0 * math.pi)


def _param(value, name: str, positive: bool = False) -> Tensor:
    t = as_tensor(value)
    if positive and np.any(t.data <= 0.0):
        raise ConfigError(f"{name} must be strictly positive")
    return t


def _safe_log(x: Tensor, valid: np.ndarray) -> Tensor:
    """log(x) where valid, 0 elsewhere; never feeds log a bad value."""
    safe = T.where(valid, x, np.ones_like(x.data))
    return T.where(valid, T.log(safe), np.zeros_like(x.data))


def _masked(logp: Tensor, valid: np.ndarray) -> Tensor:
    if np.all(valid):
        return logp
    valid = np.broadcast_to(valid, logp.data.shape)
    return T.where(valid, logp, np.full(logp.data.shape, -np.inf))


class Normal:
    """Elementwise Gaussian."""

    def __init__(self, loc, scale):
        self.loc = as_tensor(loc)
        self.scale = _param(scale, "Normal scale", positive=True)

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        z = (x - self.loc) / self.scale
        return -0.5 * (z * z) - T.log(self.scale) - 0.5 * LOG_2PI

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        eps = rng.standard_normal(np.broadcast_shapes(tuple(shape), self.loc.shape, self.scale.shape))
        return self.loc.data + self.scale.data * eps

    def rsample(self, rng: np.random.Generator, shape=()) -> Tensor:
        """Reparameterized draw: loc + scale * eps with eps held constant."""
        eps = rng.standard_normal(np.broadcast_shapes(tuple(shape), self.loc.shape, self.scale.shape))
        return self.loc + self.scale * Tensor(eps)


class DiagNormal:
    """Gaussian with diagonal scale over the last axis; log_prob is per event."""

    def __init__(self, loc, scale):
        self.loc = as_tensor(loc)
        self.scale = _param(scale, "DiagNormal scale", positive=True)

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        z = (x - self.loc) / self.scale
        dim = x.shape[-1]
        per = -0.5 * (z * z) - T.log(self.scale) * np.ones(dim) - 0.5 * LOG_2PI
        return T.reduce_sum(per, axis=-1)

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        eps = rng.standard_normal(np.broadcast_shapes(tuple(shape), self.loc.shape, self.scale.shape))
        return self.loc.data + self.scale.data * eps


class Gamma:
    """Elementwise Gamma in concentration/rate form."""

    def __init__(self, concentration, rate):
        self.concentration = _param(concentration, "Gamma concentration", positive=True)
        self.rate = _param(rate, "Gamma rate", positive=True)

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        valid = x.data > 0.0
        a, r = self.concentration, self.rate
        norm = a * T.log(r) - T.lgamma(a)
        logp = norm + (a - 1.0) * _safe_log(x, valid) - r * T.where(valid, x, np.zeros_like(x.data))
        return _masked(logp, valid)

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        """Marsaglia-Tsang squeeze-rejection draw; no gradient flows through."""
        full = np.broadcast_shapes(tuple(shape), self.concentration.shape, self.rate.shape)
        conc = np.broadcast_to(self.concentration.data, full)
        rate = np.broadcast_to(self.rate.data, full)
        boost = np.ones(full)
        c_eff = conc
        low = conc < 1.0
        if np.any(low):
            # Gamma(a) = Gamma(a + 1) * U^(1/a) for a < 1
            c_eff = np.where(low, conc + 1.0, conc)
            boost = np.where(low, rng.uniform(size=full) ** (1.0 / conc), 1.0)
        d = c_eff - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(full)
        todo = np.ones(full, dtype=bool)
        while np.any(todo):
            n = int(todo.sum())
            x = rng.standard_normal(n)
            v = (1.0 + c[todo] * x) ** 3
            u = rng.uniform(size=n)
            ok = v > 0.0
            accept = ok & (np.log(np.maximum(u, 1e-300)) <
                           0.5 * x * x + d[todo] * (1.0 - v + np.log(np.where(ok, v, 1.0))))
            idx = np.flatnonzero(todo)[accept]
            out.flat[idx] = (d[todo] * v)[accept]
            todo.flat[idx] = False
        return out * boost / rate


class Laplace:
    """Elementwise Laplace."""

    def __init__(self, loc, scale):
        self.loc = as_tensor(loc)
        self.scale = _param(scale, "Laplace scale", positive=True)

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        return -T.absolute(x - self.loc) / self.scale - T.log(2.0 * self.scale)

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        full = np.broadcast_shapes(tuple(shape), self.loc.shape, self.scale.shape)
        u = rng.uniform(-0.5, 0.5, size=full)
        return self.loc.data - self.scale.data * np.sign(u) * np.log1p(-2.0 * np.abs(u))


class Dirichlet:
    """Dirichlet over the last axis; log_prob is per event."""

    SIMPLEX_TOL = 1e-9

    def __init__(self, concentration):
        self.concentration = _param(concentration, "Dirichlet concentration", positive=True)
        if self.concentration.ndim < 1:
            raise ConfigError("Dirichlet concentration must have an event axis")

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        a = self.concentration
        norm = T.lgamma(T.reduce_sum(a, axis=-1)) - T.reduce_sum(T.lgamma(a), axis=-1)
        coeff = a.data - 1.0
        on_simplex = (np.abs(x.data.sum(axis=-1) - 1.0) < self.SIMPLEX_TOL) \
            & np.all(x.data >= 0.0, axis=-1)
        if np.all(coeff == 0.0):
            # uniform density on the simplex: only the normalizer survives, but
            # keep a zero-weight path to x so gradients stay defined
            per = T.reduce_sum(x * 0.0, axis=-1) + norm
            valid = on_simplex
        else:
            interior = x.data > 0.0
            per = T.reduce_sum((a - 1.0) * _safe_log(x, interior), axis=-1) + norm
            needs_pos = np.broadcast_to(coeff, x.data.shape) != 0.0
            valid = on_simplex & np.all(interior | ~needs_pos, axis=-1)
        return _masked(per, valid)

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        """Normalized independent Gamma draws."""
        g = Gamma(self.concentration, np.ones_like(self.concentration.data)).sample(rng, shape)
        return g / g.sum(axis=-1, keepdims=True)


class Uniform:
    """Elementwise uniform on [low, high)."""

    def __init__(self, low, high):
        self.low = as_tensor(low)
        self.high = as_tensor(high)
        if np.any(self.high.data <= self.low.data):
            raise ConfigError("Uniform needs high > low")

    def log_prob(self, x) -> Tensor:
        x = as_tensor(x)
        valid = (x.data >= self.low.data) & (x.data < self.high.data)
        dens = x * 0.0 - T.log(self.high - self.low)
        return _masked(dens, valid)

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        full = np.broadcast_shapes(tuple(shape), self.low.shape, self.high.shape)
        return self.low.data + (self.high.data - self.low.data) * rng.uniform(size=full)


_ELEMENTWISE = (Normal, Gamma, Laplace, Uniform)


class Mixture:
    """Finite mixture over per-event component densities.

    weights: (..., K) on the simplex; components: K distributions whose
    log_prob consumes the event and broadcasts against the weights' batch.
    event_ndim says how many trailing axes of a draw form one event.
    """

    def __init__(self, weights, components: list, event_ndim: int = 1):
        self.event_ndim = int(event_ndim)
        self.weights = as_tensor(weights)
        if np.any(np.abs(self.weights.data.sum(axis=-1) - 1.0) > 1e-9):
            raise ConfigError("Mixture weights must sum to 1 within 1e-9")
        if np.any(self.weights.data < 0.0):
            raise ConfigError("Mixture weights must be non-negative")
        if self.weights.shape[-1] != len(components):
            raise ConfigError(
                f"{len(components)} components vs weight axis {self.weights.shape[-1]}")
        self.components = components

    def log_prob(self, x) -> Tensor:
        """Log-sum-exp over components of log weight + component log density."""
        parts = []
        for comp in self.components:
            lp = comp.log_prob(x)
            if self.event_ndim and isinstance(comp, _ELEMENTWISE):
                # elementwise densities still carry the event axes; fold them
                lp = T.reduce_sum(lp, axis=tuple(range(-self.event_ndim, 0)))
            parts.append(lp)
        shape = np.broadcast_shapes(*[p.data.shape for p in parts])
        stacked = T.concat([T.reshape(T.broadcast_to(p, shape), shape + (1,)) for p in parts],
                           axis=-1)
        w = self.weights
        pos = w.data > 0.0
        log_w = T.where(pos, T.log(T.where(pos, w, np.ones_like(w.data))),
                        np.full(w.data.shape, -np.inf))
        return T.logsumexp(stacked + log_w, axis=-1)

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        draws = [np.asarray(c.sample(rng, shape)) for c in self.components]
        common = np.broadcast_shapes(*[d.shape for d in draws])
        batch = common[:len(common) - self.event_ndim]
        w = np.broadcast_to(self.weights.data, batch + (len(self.components),))
        cdf = np.cumsum(w, axis=-1)
        u = rng.uniform(size=batch + (1,))
        choice = (u >= cdf).sum(axis=-1)
        stacked = np.stack([np.broadcast_to(d, common) for d in draws], axis=0)
        idx = choice.reshape(batch + (1,) * self.event_ndim)
        return np.take_along_axis(stacked, idx[None, ...], axis=0)[0]
