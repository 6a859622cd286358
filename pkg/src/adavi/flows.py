"""Context-conditioned normalizing flows over flat latent vectors.

The push-forward direction (base noise -> latent) runs in parallel; the pull-
back direction reconstructs autoregressive inputs one dimension at a time.
Every conditioner's last layer starts at zero so the whole flow begins as the
identity map, and all scales go through softplus with a small positive floor.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .module import Linear, Module
from .tensor import Tensor

SCALE_FLOOR = 1e-6
# softplus(RAW_ONE) + SCALE_FLOOR == 1, so zero-initialized conditioners start
# with unit scale
RAW_ONE = float(np.log(np.expm1(1.0 - SCALE_FLOOR)))


def _positive_scale(raw: Tensor) -> Tensor:
    return T.softplus(raw + RAW_ONE) + SCALE_FLOOR


class ConditionalAffine(Module):
    """theta = scale(ctx) @ u + shift(ctx), scale diagonal or lower-triangular
    with a strictly positive diagonal."""

    def __init__(self, size: int, d_ctx: int, rng: np.random.Generator,
                 triangular: bool = True):
        self.size = int(size)
        self.triangular = bool(triangular)
        self.shift_map = Linear(d_ctx, size, rng, zero_init=True)
        n_scale = size * (size + 1) // 2 if triangular else size
        self.scale_map = Linear(d_ctx, n_scale, rng, zero_init=True)

    def _build_lower(self, ctx) -> tuple[Tensor, Tensor]:
        """Lower-triangular matrix (..., S, S) and its diagonal (..., S)."""
        raw = self.scale_map(ctx)
        s = self.size
        diag = _positive_scale(T.narrow(raw, -1, 0, s))
        rows = []
        off = s
        for i in range(s):
            pieces = []
            if i > 0:
                pieces.append(T.narrow(raw, -1, off, i))
                off += i
            pieces.append(T.narrow(diag, -1, i, 1))
            if i < s - 1:
                pieces.append(Tensor(np.zeros(raw.shape[:-1] + (s - 1 - i,))))
            row = T.concat(pieces, axis=-1) if len(pieces) > 1 else pieces[0]
            rows.append(T.reshape(row, row.shape[:-1] + (1, s)))
        return T.concat(rows, axis=-2), diag

    def forward(self, u, ctx) -> tuple[Tensor, Tensor]:
        shift = self.shift_map(ctx)
        if self.triangular:
            mat, diag = self._build_lower(ctx)
            theta = T.reshape(T.matmul(mat, T.reshape(u, u.shape + (1,))), u.shape) + shift
        else:
            diag = _positive_scale(self.scale_map(ctx))
            theta = u * diag + shift
        return theta, T.reduce_sum(T.log(diag), axis=-1)

    def inverse(self, theta, ctx) -> tuple[Tensor, Tensor]:
        shift = self.shift_map(ctx)
        resid = theta - shift
        if not self.triangular:
            diag = _positive_scale(self.scale_map(ctx))
            return resid / diag, T.reduce_sum(T.log(diag), axis=-1)
        mat, diag = self._build_lower(ctx)
        # back-substitution, one dimension at a time
        solved: list[Tensor] = []
        for i in range(self.size):
            acc = T.narrow(resid, -1, i, 1)
            for j in range(i):
                lij = T.narrow(T.narrow(mat, -2, i, 1), -1, j, 1)
                acc = acc - T.reshape(lij, acc.shape) * solved[j]
            solved.append(acc / T.narrow(diag, -1, i, 1))
        u = T.concat(solved, axis=-1)
        return u, T.reduce_sum(T.log(diag), axis=-1)

    def shift_params(self) -> list[tuple[str, Tensor]]:
        return [("shift_map." + k, t) for k, t in self.shift_map.named_params()]

    def scale_params(self) -> list[tuple[str, Tensor]]:
        return [("scale_map." + k, t) for k, t in self.scale_map.named_params()]


def autoregressive_masks(size: int, hidden: list[int], d_ctx: int) -> list[np.ndarray]:
    """Degree-based masks for a conditioner taking concat(u, ctx).

    Context columns get degree 0 (feed everything); u columns 1..size; output
    j may depend only on inputs of strictly smaller degree, so output j sees
    u_1..u_{j-1} plus the context.
    """
    in_deg = np.concatenate([np.arange(1, size + 1), np.zeros(d_ctx, dtype=int)])
    degs = [in_deg]
    for width in hidden:
        # cycle 0..size-1: degree-0 units carry pure context, degree-d units
        # see u_1..u_d
        degs.append(np.arange(width) % size)
    out_deg = np.concatenate([np.arange(1, size + 1)] * 2)  # shift then raw scale
    masks = []
    for prev, cur in zip(degs[:-1], degs[1:]):
        masks.append((cur[None, :] >= prev[:, None]).astype(float))
    masks.append((out_deg[None, :] > degs[-1][:, None]).astype(float))
    return masks


class MaskedDense(Module):
    def __init__(self, d_in: int, d_out: int, mask: np.ndarray,
                 rng: np.random.Generator, zero_init: bool = False):
        if mask.shape != (d_in, d_out):
            raise ConfigError(f"mask shape {mask.shape} != ({d_in}, {d_out})")
        self.lin = Linear(d_in, d_out, rng, zero_init=zero_init)
        if not zero_init:
            # the mask blanks most inputs, so size each column by its live
            # fan-in (He-style, the hidden layers are relu) to keep activation
            # scale roughly constant through the stack
            fan = np.maximum(mask.sum(axis=0), 1.0)
            self.lin.weight.data[...] = \
                rng.normal(0.0, 1.0, size=(d_in, d_out)) * np.sqrt(2.0 / fan)
        self.mask = Tensor(mask)

    def __call__(self, x) -> Tensor:
        return T.matmul(x, self.lin.weight * self.mask) + self.lin.bias


class MaskedAutoregressive(Module):
    """One masked-dense autoregressive block: theta = u * s(u,ctx) + m(u,ctx),
    with s, m depending on strictly earlier dimensions of u (and the context)."""

    def __init__(self, size: int, d_ctx: int, hidden: list[int],
                 rng: np.random.Generator):
        self.size = int(size)
        masks = autoregressive_masks(size, list(hidden), d_ctx)
        dims = [size + d_ctx] + list(hidden) + [2 * size]
        layers = []
        for i, mask in enumerate(masks):
            layers.append(MaskedDense(dims[i], dims[i + 1], mask, rng,
                                      zero_init=(i == len(masks) - 1)))
        self.layers = layers

    def _conditioner(self, u, ctx) -> tuple[Tensor, Tensor]:
        h = T.concat([u, ctx], axis=-1)
        for layer in self.layers[:-1]:
            h = T.relu(layer(h))
        out = self.layers[-1](h)
        shift = T.narrow(out, -1, 0, self.size)
        scale = _positive_scale(T.narrow(out, -1, self.size, self.size))
        return shift, scale

    def forward(self, u, ctx) -> tuple[Tensor, Tensor]:
        shift, scale = self._conditioner(u, ctx)
        theta = u * scale + shift
        return theta, T.reduce_sum(T.log(scale), axis=-1)

    def inverse(self, theta, ctx) -> tuple[Tensor, Tensor]:
        """Sequential reconstruction: dimension j of u needs u_{<j} only."""
        u = Tensor(np.zeros(theta.shape))
        for j in range(self.size):
            shift, scale = self._conditioner(u, ctx)
            u_j = (T.narrow(theta, -1, j, 1) - T.narrow(shift, -1, j, 1)) \
                / T.narrow(scale, -1, j, 1)
            parts = []
            if j > 0:
                parts.append(T.narrow(u, -1, 0, j))
            parts.append(u_j)
            if j < self.size - 1:
                parts.append(Tensor(np.zeros(theta.shape[:-1] + (self.size - 1 - j,))))
            u = T.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
        _, scale = self._conditioner(u, ctx)
        return u, T.reduce_sum(T.log(scale), axis=-1)


class ConditionalFlow(Module):
    """Masked autoregressive blocks, then one affine block, all context-driven.

    The affine sits next to the latent so its shift IS the location and its
    diagonal IS the scale of the output distribution; the autoregressive
    blocks upstream reshape the base noise when the target is not Gaussian.
    forward(u, ctx) -> (theta, log_det) pushes base noise to the latent;
    inverse(theta, ctx) -> (u, log_det) exactly undoes it.  log_det is
    log|det d theta / d u| at the corresponding point pair in both calls.
    """

    def __init__(self, size: int, d_ctx: int, rng: np.random.Generator,
                 maf_hidden: list[int] = (32, 32, 32), n_maf: int = 1,
                 triangular_affine: bool = True):
        self.size = int(size)
        self.affine = ConditionalAffine(size, d_ctx, rng, triangular=triangular_affine)
        self.mafs = [MaskedAutoregressive(size, d_ctx, list(maf_hidden), rng)
                     for _ in range(n_maf)]

    def forward(self, u, ctx) -> tuple[Tensor, Tensor]:
        total = None
        for maf in self.mafs:
            u, ld = maf.forward(u, ctx)
            total = ld if total is None else total + ld
        theta, ld = self.affine.forward(u, ctx)
        total = ld if total is None else total + ld
        return theta, total

    def inverse(self, theta, ctx) -> tuple[Tensor, Tensor]:
        u, total = self.affine.inverse(theta, ctx)
        for maf in reversed(self.mafs):
            u, ld = maf.inverse(u, ctx)
            total = total + ld
        return u, total
