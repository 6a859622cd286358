"""Command-line surface.

Commands: validate, simulate, train, infer, evaluate, baseline-mfvi,
gradcheck.  Exit codes: 0 success, 1 first validation error, 2 runtime
failure (a NaN-failed run, a failing gradient check).  The ADAVI_SEED
environment variable overrides any --seed flag.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as T
from .bijectors import link_for
from .config_io import (FORMAT_VERSION, Checkpoint, build_family,
                        config_digest, jsonl_writer, load_checkpoint,
                        parse_config, parse_train_section, save_checkpoint,
                        serialize_config, write_checkpoint)
from .distributions import (DiagNormal, Dirichlet, Gamma, Laplace, Mixture,
                            Normal, Uniform)
from .encoder import AttentionBlock, SetTransformer
from .errors import ConfigError, GradientNaN
from .flows import ConditionalFlow
from .hbm import descriptor_table, validate
from .module import LayerNorm, Linear
from .oracles import (MFVIConfig, gre_family_kl, gre_log_evidence, mfvi_elbo,
                      mfvi_fit)
from .rng import Stream, stream
from .tensor import Tensor
from .training import reverse_kl_loss, simulate_dataset, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

BUILTIN_MODELS = ("nc", "gre", "gm")


def _resolve_config_text(model: str) -> str:
    path = Path(model)
    if path.is_file():
        return path.read_text()
    if model in BUILTIN_MODELS:
        return resources.files("adavi").joinpath(
            f"configs/{model}.json").read_text()
    raise ConfigError(f"unknown model '{model}': not a built-in name"
                      f" {BUILTIN_MODELS} and no such file")


def _load(model: str):
    cfg = parse_config(_resolve_config_text(model))
    desc = validate(cfg.template)
    return cfg, desc


def _seed(flag_value, fallback):
    env = os.environ.get("ADAVI_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"ADAVI_SEED must be an integer, got '{env}'")
    return fallback if flag_value is None else flag_value


def _jumped(base: np.random.Generator, i: int) -> np.random.Generator:
    return np.random.Generator(base.bit_generator.jumped(i))


def _load_obs(path, desc):
    try:
        with np.load(path) as archive:
            if desc.observed not in archive:
                raise ConfigError(f"data file '{path}' has no"
                                  f" '{desc.observed}' array")
            return np.asarray(archive[desc.observed], dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read data file '{path}': {e}") from None


def _emit(report):
    print(json.dumps(report, sort_keys=True))


# -- commands ----------------------------------------------------------------

def cmd_validate(args):
    cfg, desc = _load(args.model)
    print(descriptor_table(desc))
    return EXIT_OK


def cmd_simulate(args):
    cfg, desc = _load(args.model)
    seed = _seed(args.seed, cfg.train.seed)
    data = simulate_dataset(cfg.template, desc, args.n,
                            stream(seed, Stream.DATA))
    np.savez(args.out, **data)
    _emit({"command": "simulate", "out": args.out, "examples": args.n,
           "seed": seed,
           "arrays": {k: list(v.shape) for k, v in data.items()}})
    return EXIT_OK


def cmd_train(args):
    cfg, desc = _load(args.model)
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read train config"
                              f" '{args.config}': {e}") from None
        cfg.train = parse_train_section(doc)
    seed = _seed(args.seed, cfg.train.seed)
    cfg.train = dataclasses.replace(cfg.train, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    family = build_family(cfg, desc)
    with_latents = any(s.loss == "forward_kl" for s in cfg.train.stages)
    dataset = simulate_dataset(cfg.template, desc, cfg.train.dataset_size,
                               stream(seed, Stream.DATA),
                               with_latents=with_latents)
    rng = stream(seed, Stream.TRAIN)
    t0 = time.monotonic()
    with open(out / "metrics.jsonl", "w") as fh:
        metrics = train(family, cfg.template, desc, dataset, cfg.train,
                        metrics_writer=jsonl_writer(fh), rng=rng)
    (out / "config.json").write_text(serialize_config(cfg))
    digest = config_digest(cfg)
    for i, snap in enumerate(metrics.stage_snapshots):
        write_checkpoint(out / f"stage{i}.ckpt",
                         Checkpoint(FORMAT_VERSION, digest, snap["params"]))
    save_checkpoint(out / "checkpoint.bin", cfg, family, rng=rng)
    _emit({"command": "train", "out": str(out), "seed": seed,
           "steps": len(metrics.records), "skipped": metrics.skipped,
           "failed": metrics.failed,
           "final_loss": metrics.records[-1]["loss"] if metrics.records
           else None,
           "seconds": round(time.monotonic() - t0, 3)})
    if metrics.failed:
        print("error: run failed, more than half of some stage's steps were"
              " skipped on NaN", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_infer(args):
    cfg, desc = _load(args.model)
    family = build_family(cfg, desc)
    load_checkpoint(args.checkpoint, cfg, family)
    data = _load_obs(args.data, desc)
    n = data.shape[0]
    seed = _seed(args.seed, cfg.train.seed)
    base = stream(seed, Stream.INFER)
    t0 = time.monotonic()

    def one(i):
        values, log_q = family.sample_posterior(data[i], args.draws,
                                                _jumped(base, i))
        return {name: v.data for name, v in values.items()}, log_q.data

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(one, range(n)))
    arrays = {name: np.stack([values[name] for values, _ in results])
              for name in desc.latent_names()}
    arrays["log_q"] = np.stack([log_q for _, log_q in results])
    np.savez(args.out, **arrays)
    _emit({"command": "infer", "out": args.out, "examples": n,
           "draws": args.draws, "seed": seed,
           "seconds": round(time.monotonic() - t0, 3),
           "arrays": {k: list(v.shape) for k, v in arrays.items()}})
    return EXIT_OK


def cmd_evaluate(args):
    cfg, desc = _load(args.model)
    family = build_family(cfg, desc)
    load_checkpoint(args.checkpoint, cfg, family)
    data = _load_obs(args.data, desc)
    n = data.shape[0]
    seed = _seed(args.seed, cfg.train.seed)
    base = stream(seed, Stream.EVAL)
    elbos = []
    for i in range(n):
        loss = reverse_kl_loss(family, cfg.template, desc, data[i][None],
                               args.draws, _jumped(base, i))
        elbos.append(-float(loss.data))
    report = {"command": "evaluate", "examples": n, "draws": args.draws,
              "seed": seed, "elbo_mean": float(np.mean(elbos)),
              "elbo_per_example": elbos}
    if args.oracle is not None:
        if cfg.template.name != "gre":
            raise ConfigError(f"the analytic oracle covers the 'gre' model,"
                              f" not '{cfg.template.name}'")
        consts = cfg.template.constants
        kls, gaps = [], []
        for i in range(n):
            kls.append(gre_family_kl(
                family, data[i], args.draws, _jumped(base, n + i),
                pop_scale=consts["pop_scale"],
                group_scale=consts["group_scale"],
                obs_scale=consts["obs_scale"]))
            gaps.append(gre_log_evidence(
                data[i], pop_scale=consts["pop_scale"],
                group_scale=consts["group_scale"],
                obs_scale=consts["obs_scale"]) - elbos[i])
        report.update({"analytic_kl_mean": float(np.mean(kls)),
                       "analytic_kl_per_example": kls,
                       "evidence_gap_mean": float(np.mean(gaps)),
                       "evidence_gap_per_example": gaps})
    _emit(report)
    return EXIT_OK


def cmd_baseline_mfvi(args):
    cfg, desc = _load(args.model)
    data = _load_obs(args.data, desc)
    n = data.shape[0]
    seed = _seed(args.seed, cfg.train.seed)
    base = stream(seed, Stream.EVAL)
    elbos, ses, failed = [], [], []
    for i in range(n):
        res = mfvi_fit(cfg.template, desc, data[i],
                       MFVIConfig(steps=args.steps, seed=seed + i))
        if res.failed:
            failed.append(i)
        elbo, se = mfvi_elbo(res, cfg.template, desc, data[i],
                             args.eval_samples, _jumped(base, i))
        elbos.append(elbo)
        ses.append(se)
    _emit({"command": "baseline-mfvi", "examples": n, "steps": args.steps,
           "seed": seed, "elbo_mean": float(np.mean(elbos)),
           "elbo_per_example": elbos, "se_per_example": ses,
           "failed_examples": failed})
    if failed:
        print(f"error: mean-field fit failed on examples {failed}",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- gradient check suite ----------------------------------------------------

def _gradcheck_checks():
    """(name, fn, inputs) triples covering layers, bijectors, densities."""
    rng = stream(0, Stream.EVAL)

    def t(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)

    checks = []

    def sum_all(x):
        return T.reduce_sum(x)

    loc, scale, x = t((3,)), t((3,), 0.5, 1.5), t((3,), 2.0, 3.0)
    checks.append(("Normal.log_prob",
                   lambda a, b, c: sum_all(Normal(a, b).log_prob(c)),
                   [loc, scale, x]))
    conc, rate, xg = t((3,), 0.8, 2.0), t((3,), 0.5, 1.5), t((3,), 1.0, 2.0)
    checks.append(("Gamma.log_prob",
                   lambda a, b, c: sum_all(Gamma(a, b).log_prob(c)),
                   [conc, rate, xg]))
    ll, ls, lx = t((3,)), t((3,), 0.5, 1.5), t((3,), 2.0, 3.0)
    checks.append(("Laplace.log_prob",
                   lambda a, b, c: sum_all(Laplace(a, b).log_prob(c)),
                   [ll, ls, lx]))
    low, high = t((3,), -2.0, -1.0), t((3,), 1.0, 2.0)
    xu = Tensor(np.zeros(3), requires_grad=True)
    checks.append(("Uniform.log_prob",
                   lambda a, b, c: sum_all(Uniform(a, b).log_prob(c)),
                   [low, high, xu]))
    dl, ds, dx = t((4,)), t((4,), 0.5, 1.5), t((4,), 1.0, 2.0)
    checks.append(("DiagNormal.log_prob",
                   lambda a, b, c: sum_all(DiagNormal(a, b).log_prob(c)),
                   [dl, ds, dx]))
    dc = t((3,), 0.8, 2.0)
    simplex = np.array([0.2, 0.3, 0.5])
    checks.append(("Dirichlet.log_prob",
                   lambda a: sum_all(Dirichlet(a).log_prob(simplex)), [dc]))
    m0, m1, xm = t((2,)), t((2,)), t((2,), 2.0, 3.0)
    weights = np.array([0.4, 0.6])
    checks.append(("Mixture.log_prob",
                   lambda a, b, c: sum_all(Mixture(
                       weights, [Normal(a, 1.0), Normal(b, 1.0)],
                       event_ndim=1).log_prob(c)),
                   [m0, m1, xm]))

    for kind, event in (("identity", (3,)), ("reshape", (2, 2)),
                        ("exp", (3,)), ("softmax_centered", (3,)),
                        ("sqrt_softmax_centered", (3,))):
        link = link_for(kind, event)
        u = t((link.latent_size,), -0.5, 0.5)
        checks.append((f"link.{kind}",
                       lambda a, lk=link: sum_all(lk.forward(a))
                       + sum_all(lk.forward_log_det_jacobian(a)), [u]))

    lin = Linear(3, 2, stream(1, Stream.INIT))
    xin = t((4, 3))
    checks.append(("Linear",
                   lambda *_: sum_all(lin(xin) * lin(xin)),
                   [xin] + [p for _, p in lin.named_params()]))
    ln = LayerNorm(3)
    xln = t((4, 3))
    checks.append(("LayerNorm",
                   lambda *_: sum_all(ln(xln) * ln(xln)),
                   [xln] + [p for _, p in ln.named_params()]))
    blk = AttentionBlock(3, 3, 4, 2, stream(2, Stream.INIT))
    q, k = t((2, 3)), t((5, 3))
    checks.append(("AttentionBlock",
                   lambda *_: sum_all(blk(q, k) * blk(q, k)), [q, k]))
    st = SetTransformer(2, 3, stream(3, Stream.INIT), n_heads=1, n_inducing=2)
    xs = t((4, 2))
    checks.append(("SetTransformer",
                   lambda *_: sum_all(st(xs) * st(xs)), [xs]))
    flow = ConditionalFlow(2, 3, stream(4, Stream.INIT), maf_hidden=(4,))
    u, ctx = t((2,)), t((3,))
    def flow_fn(*_):
        theta, ld = flow.forward(u, ctx)
        return sum_all(theta * theta) + sum_all(ld)
    checks.append(("ConditionalFlow",
                   flow_fn,
                   [u, ctx] + [p for _, p in flow.named_params()]))
    return checks


def cmd_gradcheck(args):
    checks = _gradcheck_checks()
    worst_name, worst = None, 0.0
    failed = 0
    for name, fn, inputs in checks:
        err = T.gradcheck(fn, inputs)
        ok = err < 1e-5
        print(f"{'ok  ' if ok else 'FAIL'} {name:<28} max rel err {err:.2e}")
        if err > worst:
            worst_name, worst = name, err
        failed += 0 if ok else 1
    print(f"{len(checks) - failed} passed, {failed} failed;"
          f" worst {worst_name} at {worst:.2e}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


# -- argument parsing --------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="adavi",
        description="Amortized dual variational inference for pyramidal"
                    " hierarchical models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        return p

    p = add("validate", cmd_validate,
            help="check a model config and print its descriptor table")
    p.add_argument("model")

    p = add("simulate", cmd_simulate, help="draw examples from the prior")
    p.add_argument("model")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, help="run the staged training recipe")
    p.add_argument("model")
    p.add_argument("--config", default=None,
                   help="JSON file overriding the train section")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")

    p = add("infer", cmd_infer,
            help="draw posterior samples for each example in a data file")
    p.add_argument("model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--draws", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=min(8, os.cpu_count() or 1))
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate,
            help="estimate the held-out ELBO of a trained family")
    p.add_argument("model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--draws", type=int, default=256)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--oracle", choices=("gre",), default=None,
                   help="also report analytic KL and evidence gap")

    p = add("baseline-mfvi", cmd_baseline_mfvi,
            help="fit the per-example mean-field baseline")
    p.add_argument("model")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=12000)
    p.add_argument("--eval-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)

    add("gradcheck", cmd_gradcheck,
        help="finite-difference check of every layer, link and density")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (GradientNaN, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
