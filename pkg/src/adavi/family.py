"""The amortized dual variational family.

One hierarchical set encoder summarizes the observed data once per level;
each latent RV gets its own conditional normalizing flow driven by the
summary at its hierarchy level. Every parameter lives in the encoder or in
a flow conditioner, so the total count never depends on plate cardinalities.

Posterior draws follow base noise u ~ N(0, I) through flow and constraint
link into event space; densities run the same path backwards. Lead axes of
the observed data and of latent values broadcast right-aligned, so one
family instance serves minibatched training, multi-draw evaluation, and
single-data-set inference unchanged.
"""

import numpy as np

from . import tensor as T
from .encoder import HierarchicalEncoder
from .errors import ConfigError
from .flows import ConditionalFlow
from .hbm import Descriptors
from .module import Module
from .rng import Stream, stream
from .tensor import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


class DualFamily(Module):
    def __init__(self, desc: Descriptors, d_enc: int = 8, n_heads: int = 2,
                 n_inducing: int = 8, maf_hidden=(32, 32, 32), n_maf: int = 1,
                 triangular_affine: bool = True, seed: int = 0):
        rng = stream(seed, Stream.INIT)
        self.desc = desc
        self.obs_event = desc.shape[desc.observed]
        self.d_obs = int(np.prod(self.obs_event))
        self.obs_batch = desc.batch_shape(desc.observed)
        self.encoder = HierarchicalEncoder(
            n_plates=len(desc.plates), d_obs=self.d_obs, d_enc=d_enc, rng=rng,
            n_heads=n_heads, n_inducing=n_inducing)
        self.d_enc = d_enc
        flows = {}
        for name in desc.latent_names():
            h = desc.hier[name]
            if not 1 <= h <= len(desc.plates):
                raise ConfigError(f"latent '{name}' at level {h} has no summary")
            flows[name] = ConditionalFlow(
                desc.latent_size(name), d_enc, rng, maf_hidden=maf_hidden,
                n_maf=n_maf, triangular_affine=triangular_affine)
        self.flows = flows

    # -- observed-data contexts ------------------------------------------

    def _contexts(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        tail = self.obs_batch + self.obs_event
        if x.data.shape[x.data.ndim - len(tail):] != tail:
            raise ConfigError(
                f"observed data must end with {tail}, got {x.data.shape}")
        lead = x.data.shape[:x.data.ndim - len(tail)]
        if len(self.obs_event) != 1:
            x = T.reshape(x, lead + self.obs_batch + (self.d_obs,))
        return self.encoder.encode(x), lead

    # -- q(theta | x) -----------------------------------------------------

    def sample_posterior(self, x, k_draws: int, rng: np.random.Generator):
        """Draw k_draws posterior samples per data set.

        Returns ({name: event-space Tensor with lead + (k,) + batch + event
        shape}, log_q with lead + (k,)).
        """
        contexts, lead = self._contexts(x)
        values = {}
        log_q = Tensor(np.zeros(lead + (k_draws,)))
        for name in self.desc.latent_names():
            link = self.desc.links[name]
            size = self.desc.latent_size(name)
            batch = self.desc.batch_shape(name)
            u = Tensor(rng.standard_normal(lead + (k_draws,) + batch + (size,)))
            ctx = contexts[self.desc.hier[name]]
            ctx = T.reshape(ctx, lead + (1,) + batch + (self.d_enc,))
            ctx = T.broadcast_to(ctx, lead + (k_draws,) + batch + (self.d_enc,))
            theta_u, flow_ld = self.flows[name].forward(u, ctx)
            values[name] = link.forward(theta_u)
            base = Tensor(-0.5 * np.sum(u.data * u.data, axis=-1) - 0.5 * size * LOG_2PI)
            lp = base - flow_ld - link.forward_log_det_jacobian(theta_u)
            if batch:
                lp = T.reduce_sum(lp, axis=tuple(range(-len(batch), 0)))
            log_q = log_q + lp
        return values, log_q

    def posterior_log_prob(self, x, values: dict):
        """log q of given event-space latents.

        The lead axes of x must be a prefix of each value's lead axes; any
        extra value axes after that prefix count as independent draws.
        """
        contexts, lead = self._contexts(x)
        total = None
        for name in self.desc.latent_names():
            if name not in values:
                raise ConfigError(f"missing value for latent '{name}'")
            link = self.desc.links[name]
            size = self.desc.latent_size(name)
            batch = self.desc.batch_shape(name)
            val = values[name]
            if not isinstance(val, Tensor):
                val = Tensor(np.asarray(val, dtype=np.float64))
            theta_u = link.inverse(val)
            val_lead = theta_u.data.shape[:theta_u.data.ndim - 1 - len(batch)]
            extra = len(val_lead) - len(lead)
            if extra < 0:
                raise ConfigError(
                    f"latent '{name}' has fewer lead axes {val_lead} than the "
                    f"observed data {lead}")
            ctx = contexts[self.desc.hier[name]]
            ctx = T.reshape(ctx, lead + (1,) * extra + batch + (self.d_enc,))
            ctx = T.broadcast_to(ctx, val_lead + batch + (self.d_enc,))
            u, flow_ld = self.flows[name].inverse(theta_u, ctx)
            base = T.reduce_sum(u * u, axis=-1) * (-0.5) - 0.5 * size * LOG_2PI
            lp = base - flow_ld + link.inverse_log_det_jacobian(val)
            if batch:
                lp = T.reduce_sum(lp, axis=tuple(range(-len(batch), 0)))
            total = lp if total is None else total + lp
        return total

    def map_estimate(self, x) -> dict:
        """Deterministic warm-up guess: the affine shift of each flow, pushed
        through the constraint link. No sampling, no scale, no autoregression."""
        contexts, _ = self._contexts(x)
        out = {}
        for name in self.desc.latent_names():
            ctx = contexts[self.desc.hier[name]]
            shift = self.flows[name].affine.shift_map(ctx)
            out[name] = self.desc.links[name].forward(shift)
        return out

    # -- parameter bookkeeping -------------------------------------------

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups = {
            "encoder": [("encoder." + n, p) for n, p in self.encoder.named_params()],
            "affine_shift": [],
            "affine_scale": [],
            "maf": [],
        }
        for name, flow in self.flows.items():
            pre = f"flows.{name}."
            groups["affine_shift"] += [(pre + "affine." + n, p)
                                       for n, p in flow.affine.shift_params()]
            groups["affine_scale"] += [(pre + "affine." + n, p)
                                       for n, p in flow.affine.scale_params()]
            for i, maf in enumerate(flow.mafs):
                groups["maf"] += [(pre + f"mafs.{i}." + n, p)
                                  for n, p in maf.named_params()]
        return groups

    def all_named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for group in self.param_groups().values():
            out.extend(group)
        return out

    def num_params(self) -> int:
        return sum(t.size for _, t in self.all_named_params())
