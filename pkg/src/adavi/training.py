"""Dataset simulation, the four training losses, and the staged trainer.

Losses all reduce to scalar means over minibatch (and draw) axes:

  reverse_kl           mean[log q(theta|x) - log p(x, theta)], theta ~ q
  unregularized_elbo   mean[-log p(x, theta)], theta ~ q (same path, no entropy)
  forward_kl           mean[-log q(theta|x)], (theta, x) ~ prior
  map_warmup           mean[-log p(x, theta_hat)], theta_hat the shift-only guess

The trainer runs an ordered list of stages, each with its own learning rate
and trainable-parameter mask, resetting optimizer state at every boundary.
A step whose loss or gradient is non-finite is skipped and counted; a stage
that skips more than half its steps marks the whole run failed.

Each stage ends by swapping in a bias-corrected exponential average of its
iterates. At a constant learning rate the raw iterates orbit the optimum
(gradients stay large after the posterior contracts, so Adam keeps taking
full-size steps); the tail average sits near the orbit center and is much
closer to a converged point than whichever iterate the last step happens
to land on.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, GradientNaN
from .hbm import joint_log_prob, prior_sample
from .optim import Adam
from .rng import Stream, stream
from .tensor import Tape

LOSSES = ("map_warmup", "unregularized_elbo", "reverse_kl", "forward_kl")
MASKS = ("shift", "affine", "all")
EMA_DECAY = 0.985


@dataclass
class Stage:
    loss: str
    epochs: int
    lr: float = 1e-3
    mask: str = "all"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss '{self.loss}', pick from {LOSSES}")
        if self.mask not in MASKS:
            raise ConfigError(f"unknown mask '{self.mask}', pick from {MASKS}")
        if self.epochs < 0:
            raise ConfigError("stage epochs must be >= 0")


@dataclass
class TrainConfig:
    dataset_size: int
    minibatch: int
    k_draws: int
    seed: int
    stages: list

    def __post_init__(self):
        if min(self.dataset_size, self.minibatch, self.k_draws) < 1:
            raise ConfigError("dataset_size, minibatch and k_draws must be positive")


@dataclass
class Metrics:
    """Append-only training log."""

    records: list = field(default_factory=list)   # {step, stage, loss, elapsed}
    skipped: int = 0
    failed: bool = False
    stage_snapshots: list = field(default_factory=list)

    def log(self, step, stage, loss, elapsed, writer=None):
        rec = {"step": int(step), "stage": stage, "loss": float(loss),
               "elapsed": float(elapsed)}
        self.records.append(rec)
        if writer is not None:
            writer(rec)

    def losses(self, stage=None):
        return [r["loss"] for r in self.records
                if stage is None or r["stage"] == stage]


def simulate_dataset(template, desc, n, rng, with_latents=True):
    """n joint prior draws with a lead axis; drop latents when only the
    observed data will ever be read."""
    if n < 1:
        raise ConfigError("need at least one simulated example")
    draw = prior_sample(template, desc, rng, n=n)
    if not with_latents:
        return {desc.observed: draw[desc.observed]}
    return draw


def _obs_with_draw_axis(x, desc):
    """Insert the K axis between the minibatch lead and the plate axes."""
    x = np.asarray(x, dtype=np.float64)
    tail = desc.batch_shape(desc.observed) + desc.shape[desc.observed]
    lead = x.shape[:x.ndim - len(tail)]
    return x.reshape(lead + (1,) + tail)


def reverse_kl_loss(family, template, desc, x, k_draws, rng):
    values, log_q = family.sample_posterior(x, k_draws, rng)
    full = dict(values)
    full[desc.observed] = _obs_with_draw_axis(x, desc)
    lp = joint_log_prob(template, desc, full)
    if np.isneginf(lp.data).any():
        raise RuntimeError(
            "joint log density hit -inf under posterior draws; "
            "a link must be missing for some constrained support")
    return T.reduce_mean(log_q - lp)


def unregularized_elbo_loss(family, template, desc, x, k_draws, rng):
    values, _ = family.sample_posterior(x, k_draws, rng)
    full = dict(values)
    full[desc.observed] = _obs_with_draw_axis(x, desc)
    lp = joint_log_prob(template, desc, full)
    if np.isneginf(lp.data).any():
        raise RuntimeError(
            "joint log density hit -inf under posterior draws; "
            "a link must be missing for some constrained support")
    return T.reduce_mean(0.0 - lp)


def forward_kl_loss(family, batch):
    desc = family.desc
    x = batch[desc.observed]
    theta = {n: batch[n] for n in desc.latent_names()}
    return T.reduce_mean(0.0 - family.posterior_log_prob(x, theta))


def map_warmup_loss(family, template, desc, x):
    est = family.map_estimate(x)
    full = dict(est)
    full[desc.observed] = np.asarray(x, dtype=np.float64)
    return T.reduce_mean(0.0 - joint_log_prob(template, desc, full))


def stage_params(family, mask):
    """Trainable (name, tensor) pairs for a stage mask. The encoder always
    trains; the mask gates how much of each flow follows."""
    groups = family.param_groups()
    keys = {"shift": ("encoder", "affine_shift"),
            "affine": ("encoder", "affine_shift", "affine_scale"),
            "all": ("encoder", "affine_shift", "affine_scale", "maf")}[mask]
    return [pair for key in keys for pair in groups[key]]


def train(family, template, desc, dataset, config: TrainConfig,
          metrics_writer=None, rng=None):
    """Run the staged recipe over a simulated dataset; returns Metrics.

    dataset: dict of prior draws with a lead axis of size dataset_size
    (latents are only read by forward-KL stages).  An externally built rng
    may be passed so the caller can persist its position afterwards.
    """
    x_all = np.asarray(dataset[desc.observed], dtype=np.float64)
    m = x_all.shape[0]
    if m != config.dataset_size:
        raise ConfigError(
            f"dataset has {m} examples but the config says {config.dataset_size}")
    if rng is None:
        rng = stream(config.seed, Stream.TRAIN)
    metrics = Metrics()
    t0 = time.monotonic()
    step = 0
    for stage_idx, stage in enumerate(config.stages):
        params = stage_params(family, stage.mask)
        # gradient scale grows ~1/sigma^2 while the posterior contracts, so
        # the second-moment horizon must be short enough to track it; the
        # default 0.999 lags by ~1000 steps and lets early small-gradient
        # history shrink the denominator mid-run
        opt = Adam(params, stage.lr, beta2=0.99)
        tensors = [p for _, p in params]
        n_steps = stage.epochs * math.ceil(m / config.minibatch)
        skipped = 0
        ema = [np.zeros_like(p.data) for p in tensors]
        ema_w = 0.0
        for epoch in range(stage.epochs):
            perm = rng.permutation(m)
            for lo in range(0, m, config.minibatch):
                idx = perm[lo:lo + config.minibatch]
                try:
                    with Tape() as tape:
                        if stage.loss == "reverse_kl":
                            loss = reverse_kl_loss(family, template, desc,
                                                   x_all[idx], config.k_draws, rng)
                        elif stage.loss == "unregularized_elbo":
                            loss = unregularized_elbo_loss(family, template, desc,
                                                           x_all[idx],
                                                           config.k_draws, rng)
                        elif stage.loss == "forward_kl":
                            batch = {k: np.asarray(v)[idx] for k, v in dataset.items()}
                            loss = forward_kl_loss(family, batch)
                        else:
                            loss = map_warmup_loss(family, template, desc, x_all[idx])
                    if not np.isfinite(loss.data):
                        skipped += 1
                        step += 1
                        continue
                    grads = tape.backward(loss, params=tensors)
                    opt.step(grads)
                except GradientNaN:
                    skipped += 1
                    step += 1
                    continue
                for acc, p in zip(ema, tensors):
                    acc *= EMA_DECAY
                    acc += (1.0 - EMA_DECAY) * p.data
                ema_w = EMA_DECAY * ema_w + (1.0 - EMA_DECAY)
                metrics.log(step, stage.loss, float(loss.data),
                            time.monotonic() - t0, metrics_writer)
                step += 1
        if ema_w > 0.0:
            for acc, p in zip(ema, tensors):
                p.data[...] = acc / ema_w
        metrics.skipped += skipped
        if n_steps and skipped > 0.5 * n_steps:
            metrics.failed = True
        metrics.stage_snapshots.append({
            "stage": stage_idx,
            "loss": stage.loss,
            "params": {name: p.data.copy() for name, p in family.all_named_params()},
        })
    return metrics


def moving_average(values, window=20):
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo:i + 1])))
    return out
