"""Ground truth and baselines.

The grouped random-effects model is linear-Gaussian throughout, so its
posterior and evidence have closed forms; they anchor every quantitative
claim about trained families. The mean-field fits are the non-amortized
per-example baseline: one small variational family per model, optimized
directly on a single data set.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sp_stats

from . import tensor as T
from .distributions import DiagNormal, Dirichlet, Gamma
from .errors import ConfigError, GradientNaN
from .hbm import joint_log_prob
from .optim import Adam
from .rng import Stream, stream
from .tensor import Tape, Tensor


# -- closed forms for the grouped random-effects model -----------------------

@dataclass
class AnalyticGREPosterior:
    """Per-group and top-level diagonal Gaussians."""

    group_mean: np.ndarray      # (G, D)
    group_var: float            # shared across groups and dims
    top_mean: np.ndarray        # (D,)
    top_var: float

    def __post_init__(self):
        if self.group_var <= 0 or self.top_var <= 0:
            raise ConfigError("posterior variances must be positive")


def gre_analytic_posterior(x, pop_scale=1.0, group_scale=0.2, obs_scale=0.05):
    """Conjugate posterior for the grouped random-effects model.

    Group posteriors take the data at face value (the prior pull on a group
    mean is negligible at N x precision and is deliberately dropped); the
    top level then shrinks the average of group means toward zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigError(f"expected (G, N, D) data, got {x.shape}")
    g, n, _ = x.shape
    group_mean = x.mean(axis=1)
    group_var = obs_scale ** 2 / n
    prec = 1.0 / pop_scale ** 2 + g / group_scale ** 2
    top_var = 1.0 / prec
    top_mean = (g / group_scale ** 2) * group_mean.mean(axis=0) / prec
    return AnalyticGREPosterior(group_mean, group_var, top_mean, top_var)


def gre_log_evidence(x, pop_scale=1.0, group_scale=0.2, obs_scale=0.05):
    """Exact log p(X): one dense Gaussian marginal per data dimension."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigError(f"expected (G, N, D) data, got {x.shape}")
    g, n, d = x.shape
    eye = np.eye(g * n)
    ones_block = np.kron(np.eye(g), np.ones((n, n)))
    cov = (obs_scale ** 2) * eye + (group_scale ** 2) * ones_block \
        + (pop_scale ** 2) * np.ones((g * n, g * n))
    total = 0.0
    for dim in range(d):
        total += sp_stats.multivariate_normal.logpdf(
            x[:, :, dim].reshape(-1), mean=np.zeros(g * n), cov=cov)
    return float(total)


def gaussian_kl(mean_p, var_p, mean_q, var_q):
    """KL(p || q) between diagonal Gaussians, summed over all coordinates."""
    mean_p, var_p, mean_q, var_q = map(
        lambda a: np.asarray(a, dtype=np.float64), (mean_p, var_p, mean_q, var_q))
    mean_p, mean_q = np.broadcast_arrays(mean_p, mean_q)
    var_p = np.broadcast_to(var_p, mean_p.shape)
    var_q = np.broadcast_to(var_q, mean_p.shape)
    if np.any(var_p <= 0) or np.any(var_q <= 0):
        raise ConfigError("gaussian_kl needs positive variances")
    terms = 0.5 * (np.log(var_q / var_p) + (var_p + (mean_p - mean_q) ** 2) / var_q - 1.0)
    return float(terms.sum())


def gre_summed_kl(q_group_mean, q_group_var, q_top_mean, q_top_var, analytic):
    """KL(q || analytic) summed over the top block and every group block."""
    return gaussian_kl(q_group_mean, q_group_var,
                       analytic.group_mean, analytic.group_var) \
        + gaussian_kl(q_top_mean, q_top_var, analytic.top_mean, analytic.top_var)


def gre_family_kl(family, x, n_draws, rng, pop_scale=1.0, group_scale=0.2,
                  obs_scale=0.05):
    """Summed KL of a trained dual family against the analytic posterior.

    The family's marginals are reduced to moment-matched diagonal Gaussians
    estimated from n_draws posterior samples, then compared in closed form.
    """
    values, _ = family.sample_posterior(x, n_draws, rng)
    pop = values["pop_mean"].data
    grp = values["group_means"].data
    analytic = gre_analytic_posterior(x, pop_scale, group_scale, obs_scale)
    return gre_summed_kl(grp.mean(axis=0), grp.var(axis=0, ddof=1),
                         pop.mean(axis=0), pop.var(axis=0, ddof=1), analytic)


# -- mean-field variational baselines ----------------------------------------

@dataclass
class MFVIConfig:
    steps: int = 600
    lr: float = 1e-2
    sample_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.steps, self.sample_size) < 1:
            raise ConfigError("steps and sample_size must be positive")


@dataclass
class MFVIResult:
    model: str
    params: dict
    trace: list = field(default_factory=list)
    skipped: int = 0
    failed: bool = False


def _softplus_np(a):
    return np.logaddexp(0.0, a)


def _loo_weights(f):
    """Per-sample advantage against the leave-one-out mean of the others."""
    s = f.size
    if s < 2:
        return f - f.mean()
    total = f.sum()
    return f - (total - f) / (s - 1)


def _gre_step(params, template, desc, x, n, rng):
    """Pathwise estimator; all blocks Gaussian."""
    pop_scale = T.softplus(params["pop_raw_scale"])
    grp_scale = T.softplus(params["group_raw_scale"])
    g, d = params["group_mean"].shape
    pop = params["pop_mean"] + pop_scale * Tensor(rng.standard_normal((n, d)))
    grp = params["group_mean"] + grp_scale * Tensor(rng.standard_normal((n, g, d)))
    lp = joint_log_prob(template, desc, {"pop_mean": pop, "group_means": grp,
                                         "obs": x})
    log_q = DiagNormal(params["pop_mean"], pop_scale).log_prob(pop) \
        + T.reduce_sum(DiagNormal(params["group_mean"], grp_scale).log_prob(grp),
                       axis=-1)
    f = lp - log_q
    return T.reduce_mean(0.0 - f), f.data


def _nc_step(params, template, desc, x, n, rng):
    """Score-function estimator with a leave-one-out baseline; the location
    block is Gamma, which has no simple sampling path to differentiate."""
    conc = T.softplus(params["loc_raw_conc"])
    rate = T.softplus(params["loc_raw_rate"])
    z = rng.gamma(conc.data, 1.0 / rate.data, size=(n,) + conc.data.shape)
    log_q = T.reduce_sum(Gamma(conc, rate).log_prob(z), axis=-1)
    lp = joint_log_prob(template, desc, {"loc": z, "obs": x})
    f = (lp.data - log_q.data)
    w = _loo_weights(f)
    surrogate = T.reduce_mean(0.0 - Tensor(w) * log_q)
    return surrogate, f


def _gm_step(params, template, desc, x, n, rng):
    """Pathwise for the Gaussian blocks, score-function for the simplex one."""
    comp_scale = T.softplus(params["comp_raw_scale"])
    grp_scale = T.softplus(params["group_raw_scale"])
    conc = T.softplus(params["weights_raw_conc"])
    l, d = params["comp_mean"].shape
    g = params["group_mean"].shape[0]
    comp = params["comp_mean"] + comp_scale * Tensor(rng.standard_normal((n, l, d)))
    grp = params["group_mean"] + grp_scale * Tensor(rng.standard_normal((n, g, l, d)))
    w = np.stack([[rng.dirichlet(conc.data[gi]) for gi in range(g)]
                  for _ in range(n)])
    lp = joint_log_prob(template, desc, {
        "comp_means": comp, "group_comp_means": grp, "weights": w, "obs": x})
    log_q_gauss = T.reduce_sum(DiagNormal(params["comp_mean"], comp_scale)
                               .log_prob(comp), axis=-1)
    log_q_grp = T.reduce_sum(DiagNormal(params["group_mean"], grp_scale)
                             .log_prob(grp), axis=(-2, -1))
    log_q_dir = T.reduce_sum(Dirichlet(conc).log_prob(w), axis=-1)
    log_q = log_q_gauss + log_q_grp + log_q_dir
    f_t = lp - log_q
    f = f_t.data
    w_adv = _loo_weights(f)
    surrogate = T.reduce_mean(0.0 - f_t) + T.reduce_mean(0.0 - Tensor(w_adv) * log_q_dir)
    return surrogate, f


_MFVI_INIT = {
    "gre": lambda desc: {
        "pop_mean": np.zeros(desc.shape["pop_mean"]),
        "pop_raw_scale": np.zeros(()),
        "group_mean": np.zeros((desc.cardinality["groups"],)
                               + desc.shape["group_means"]),
        "group_raw_scale": np.zeros(()),
    },
    "nc": lambda desc: {
        "loc_raw_conc": np.zeros(desc.shape["loc"]),
        "loc_raw_rate": np.zeros(()),
    },
    "gm": lambda desc: {
        "comp_mean": np.zeros(desc.shape["comp_means"]),
        "comp_raw_scale": np.zeros(()),
        "group_mean": np.zeros((desc.cardinality["groups"],)
                               + desc.shape["group_comp_means"]),
        "group_raw_scale": np.zeros(()),
        "weights_raw_conc": np.full(
            (desc.cardinality["groups"], desc.shape["weights"][0]),
            math.log(math.e - 1.0)),
    },
}

_MFVI_STEP = {"gre": _gre_step, "nc": _nc_step, "gm": _gm_step}

# horizon for the end-of-fit iterate average; at a constant learning rate the
# raw iterates keep orbiting the optimum under gradient noise, and the orbit
# center is the converged point the fit should report; the horizon stays short
# so a still-drifting coordinate is not dragged backwards
MFVI_EMA = 0.995


def mfvi_fit(template, desc, x, config: MFVIConfig) -> MFVIResult:
    """Per-example mean-field fit by stochastic gradient on the MC ELBO."""
    if template.name not in _MFVI_STEP:
        raise ConfigError(f"no mean-field family for template '{template.name}'")
    params = {k: Tensor(v, requires_grad=True)
              for k, v in _MFVI_INIT[template.name](desc).items()}
    step_fn = _MFVI_STEP[template.name]
    named = sorted(params.items())
    opt = Adam(named, config.lr)
    rng = stream(config.seed, Stream.BASELINE)
    result = MFVIResult(model=template.name,
                        params={k: p for k, p in params.items()})
    x = np.asarray(x, dtype=np.float64)
    ema = [np.zeros_like(p.data) for _, p in named]
    ema_w = 0.0
    for _ in range(config.steps):
        try:
            with Tape() as tape:
                loss, f = step_fn(params, template, desc, x,
                                  config.sample_size, rng)
            if not np.isfinite(loss.data):
                result.skipped += 1
                continue
            grads = tape.backward(loss, params=[p for _, p in named])
            opt.step(grads)
        except GradientNaN:
            result.skipped += 1
            continue
        for acc, (_, p) in zip(ema, named):
            acc *= MFVI_EMA
            acc += (1.0 - MFVI_EMA) * p.data
        ema_w = MFVI_EMA * ema_w + (1.0 - MFVI_EMA)
        result.trace.append(float(np.mean(f)))
    if ema_w > 0.0:
        for acc, (_, p) in zip(ema, named):
            p.data = np.asarray(acc / ema_w, dtype=np.float64)
    if result.skipped > 0.5 * config.steps:
        result.failed = True
    return result


def family_elbo(family, template, desc, x, n_draws, rng):
    """MC ELBO of a trained dual family on one example: (estimate, standard
    error). Always a lower bound on the evidence up to MC noise."""
    values, log_q = family.sample_posterior(x, n_draws, rng)
    full = dict(values)
    full[desc.observed] = np.asarray(x, dtype=np.float64)
    f = joint_log_prob(template, desc, full).data - log_q.data
    return float(np.mean(f)), float(np.std(f, ddof=1) / np.sqrt(n_draws))


def mfvi_elbo(result: MFVIResult, template, desc, x, n_samples, rng):
    """MC ELBO of a fitted family on data x: (estimate, standard error)."""
    _, f = _MFVI_STEP[result.model](result.params, template, desc,
                                    np.asarray(x, dtype=np.float64),
                                    n_samples, rng)
    return float(np.mean(f)), float(np.std(f, ddof=1) / np.sqrt(n_samples))


def mfvi_gre_moments(result: MFVIResult):
    """Event-space means and variances of a fitted GRE family."""
    if result.model != "gre":
        raise ConfigError("moments helper is for the gre family")
    p = result.params
    return {
        "pop_mean": (p["pop_mean"].data.copy(),
                     _softplus_np(p["pop_raw_scale"].data) ** 2),
        "group_means": (p["group_mean"].data.copy(),
                        _softplus_np(p["group_raw_scale"].data) ** 2),
    }
