"""Hierarchical Bayesian model templates over a single nested plate stack.

A template declares plates (rank 0 innermost, holding the observed RV),
constants, and random variables whose parameters refer to constants or to
parent RVs.  Validation derives the descriptor maps driving everything
downstream: declaration order, plate cardinalities, each RV's hierarchy level
(the rank of its innermost plate, or one past the deepest rank when
plate-free), event shapes, and constraint links.

Grounded values carry batch axes ordered outermost plate first, so an RV at
hierarchy h has shape (Card(P_P), ..., Card(P_h)) + event_shape, and a
parent's batch axes are always a prefix of its children's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bijectors import LINK_KINDS, link_for
from .distributions import (DiagNormal, Dirichlet, Gamma, Laplace, Mixture,
                            Normal, Uniform)
from .errors import ConfigError
from .tensor import Tensor, as_tensor

DIST_KINDS = ("Normal", "Gamma", "Laplace", "Dirichlet", "Uniform", "Mixture")

# kinds whose log_prob is elementwise (summed over batch and event axes);
# the others consume the event axis themselves
_ELEMENTWISE = {"Normal", "Gamma", "Laplace", "Uniform"}

_DIST_CLS = {"Normal": Normal, "Gamma": Gamma, "Laplace": Laplace,
             "Dirichlet": Dirichlet, "Uniform": Uniform}


@dataclass(frozen=True)
class Plate:
    name: str
    rank: int
    cardinality: int


@dataclass(frozen=True)
class Param:
    """Exactly one of: a literal value, a named constant, a parent RV."""
    value: object = None
    const: str | None = None
    parent: str | None = None

    def __post_init__(self):
        set_count = sum(x is not None for x in (self.value, self.const, self.parent))
        if set_count != 1:
            raise ConfigError("Param needs exactly one of value / const / parent")


@dataclass(frozen=True)
class DistSpec:
    kind: str
    params: dict[str, Param]
    component: "DistSpec | None" = None


@dataclass(frozen=True)
class RVSpec:
    name: str
    dist: DistSpec
    plates: tuple[str, ...]
    event_shape: tuple[int, ...]
    link: str = "identity"
    observed: bool = False


@dataclass
class GraphTemplate:
    name: str
    plates: list[Plate]
    constants: dict[str, float]
    rvs: list[RVSpec]


@dataclass
class Descriptors:
    """The static analysis of a template: everything the variational family
    construction needs, and nothing about any particular data set."""

    rv_names: list[str]
    plates: list[Plate]                      # by ascending rank
    cardinality: dict[str, int]              # plate name -> cardinality
    hier: dict[str, int]                     # rv name -> hierarchy level
    shape: dict[str, tuple[int, ...]]        # rv name -> event shape
    link: dict[str, str]                     # rv name -> printable link
    links: dict[str, object] = field(repr=False, default_factory=dict)
    observed: str = ""
    topo_order: list[str] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.plates) - 1

    def batch_shape(self, name: str) -> tuple[int, ...]:
        h = self.hier[name]
        return tuple(p.cardinality for p in reversed(self.plates) if p.rank >= h)

    def latent_names(self) -> list[str]:
        return [n for n in self.rv_names if n != self.observed]

    def latent_size(self, name: str) -> int:
        return self.links[name].latent_size


def descriptor_table(desc: Descriptors) -> str:
    """Aligned text rendering of the static maps, one row per variable."""
    rows = [("rv", "hier", "event", "batch", "link", "role")]
    for name in desc.rv_names:
        rows.append((name, str(desc.hier[name]), str(desc.shape[name]),
                     str(desc.batch_shape(name)), desc.link[name],
                     "observed" if name == desc.observed else "latent"))
    widths = [max(len(r[i]) for r in rows) for i in range(6)]
    lines = ["plates: " + ", ".join(
        f"{p.name}(rank {p.rank}, n={p.cardinality})" for p in desc.plates)]
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def validate(template: GraphTemplate) -> Descriptors:
    """Check the pyramidal contract and derive the descriptor maps."""
    plates = sorted(template.plates, key=lambda p: p.rank)
    ranks = [p.rank for p in plates]
    if ranks != list(range(len(plates))) or not plates:
        raise ConfigError(f"plate ranks must be 0..P without gaps, got {ranks}")
    if len({p.name for p in plates}) != len(plates):
        raise ConfigError("plate names must be unique")
    for p in plates:
        if p.cardinality < 1:
            raise ConfigError(f"plate '{p.name}' needs cardinality >= 1")
    depth = len(plates) - 1
    by_name = {p.name: p for p in plates}

    names = [rv.name for rv in template.rvs]
    if len(set(names)) != len(names):
        raise ConfigError("RV names must be unique")
    rv_by_name = {rv.name: rv for rv in template.rvs}

    hier: dict[str, int] = {}
    for rv in template.rvs:
        member_ranks = []
        for pname in rv.plates:
            if pname not in by_name:
                raise ConfigError(f"RV '{rv.name}' references unknown plate '{pname}'")
            member_ranks.append(by_name[pname].rank)
        if member_ranks:
            h = min(member_ranks)
            if sorted(member_ranks) != list(range(h, depth + 1)):
                raise ConfigError(
                    f"not pyramidal: colliding plates for RV '{rv.name}' "
                    f"(membership must cover every rank from {h} up to {depth})")
            hier[rv.name] = h
        else:
            hier[rv.name] = depth + 1

    observed = [rv.name for rv in template.rvs if rv.observed]
    if len(observed) != 1:
        raise ConfigError("not pyramidal: single observed RV required")
    obs = observed[0]
    if hier[obs] != 0:
        raise ConfigError("not pyramidal: the observed RV must belong to every plate")
    for rv in template.rvs:
        if not rv.observed and hier[rv.name] == 0:
            raise ConfigError(
                f"not pyramidal: latent RV '{rv.name}' may not live in plate rank 0")

    # parent graph and cycle check
    def parent_refs(spec: DistSpec) -> list[str]:
        refs = [p.parent for p in spec.params.values() if p.parent is not None]
        if spec.component is not None:
            refs.extend(parent_refs(spec.component))
        return refs

    parents: dict[str, list[str]] = {}
    for rv in template.rvs:
        if rv.dist.kind not in DIST_KINDS:
            raise ConfigError(f"unknown distribution kind '{rv.dist.kind}' for RV '{rv.name}'")
        if rv.dist.kind == "Mixture" and rv.dist.component is None:
            raise ConfigError(f"Mixture RV '{rv.name}' needs a component spec")
        refs = parent_refs(rv.dist)
        for ref in refs:
            if ref not in rv_by_name:
                raise ConfigError(f"RV '{rv.name}' references unknown parent '{ref}'")
            if hier[ref] < hier[rv.name]:
                raise ConfigError(
                    f"parent '{ref}' sits below RV '{rv.name}' in the plate hierarchy")
        for p in _all_params(rv.dist):
            if p.const is not None and p.const not in template.constants:
                raise ConfigError(f"RV '{rv.name}' references unknown constant '{p.const}'")
        parents[rv.name] = refs

    order: list[str] = []
    state: dict[str, int] = {}

    def visit(name: str):
        if state.get(name) == 1:
            raise ConfigError("not a DAG")
        if state.get(name) == 2:
            return
        state[name] = 1
        for ref in parents[name]:
            visit(ref)
        state[name] = 2
        order.append(name)

    for name in names:
        visit(name)

    if rv_by_name[obs].link != "identity":
        raise ConfigError("the observed RV takes no constraint link")

    shape = {rv.name: tuple(rv.event_shape) for rv in template.rvs}
    links, link_str = {}, {}
    for rv in template.rvs:
        if rv.link not in LINK_KINDS:
            raise ConfigError(f"unknown link kind '{rv.link}' for RV '{rv.name}'")
        bij = link_for(rv.link, shape[rv.name])
        links[rv.name] = bij
        link_str[rv.name] = bij.describe()

    return Descriptors(
        rv_names=list(names),
        plates=plates,
        cardinality={p.name: p.cardinality for p in plates},
        hier=hier,
        shape=shape,
        link=link_str,
        links=links,
        observed=obs,
        topo_order=order,
    )


def _all_params(spec: DistSpec) -> list[Param]:
    out = list(spec.params.values())
    if spec.component is not None:
        out.extend(_all_params(spec.component))
    return out


def _insert_axes(value, at: int, count: int):
    """Reshape inserting `count` singleton axes at position `at`."""
    if count == 0:
        return value
    shape = value.shape[:at] + (1,) * count + value.shape[at:]
    if isinstance(value, Tensor):
        return T.reshape(value, shape)
    return np.reshape(value, shape)


class _Grounding:
    """Resolves Param bindings to arrays/Tensors aligned with a child RV's
    grounded batch layout."""

    def __init__(self, template: GraphTemplate, desc: Descriptors,
                 values: dict, lead_rank: int, traced: bool):
        self.template = template
        self.desc = desc
        self.values = values
        self.lead_rank = lead_rank
        self.traced = traced
        self.rv_by_name = {rv.name: rv for rv in template.rvs}

    def resolve(self, param: Param, child: RVSpec):
        if param.value is not None:
            v = np.asarray(param.value, dtype=np.float64)
        elif param.const is not None:
            v = np.asarray(self.template.constants[param.const], dtype=np.float64)
        else:
            v = self.values[param.parent]
            if self.traced:
                v = as_tensor(v)
            parent_rank = len(self.desc.batch_shape(param.parent))
            child_rank = len(self.desc.batch_shape(child.name))
            lead = (v.ndim if hasattr(v, "ndim") else np.ndim(v)) \
                - parent_rank - len(self.rv_by_name[param.parent].event_shape)
            v = _insert_axes(v, lead + parent_rank, child_rank - parent_rank)
        return as_tensor(v) if self.traced else np.asarray(v)

    def component_param(self, param: Param, child: RVSpec, index: int):
        """Component params referencing a parent slice its first event axis."""
        v = self.resolve(param, child)
        if param.parent is None:
            return v
        parent_event_rank = len(self.rv_by_name[param.parent].event_shape)
        axis = v.ndim - parent_event_rank
        if self.traced:
            sliced = T.narrow(v, axis, index, 1)
            return T.reshape(sliced, sliced.shape[:axis] + sliced.shape[axis + 1:])
        return np.take(v, index, axis=axis)

    def build(self, rv: RVSpec):
        spec = rv.dist
        if spec.kind == "Mixture":
            weights = self.resolve(spec.params["weights"], rv)
            n_comp = weights.shape[-1]
            comps = []
            for idx in range(n_comp):
                cparams = {k: self.component_param(p, rv, idx)
                           for k, p in spec.component.params.items()}
                comps.append(_DIST_CLS[spec.component.kind](**_lower(cparams)))
            return Mixture(weights, comps, event_ndim=len(rv.event_shape))
        params = {k: self.resolve(p, rv) for k, p in spec.params.items()}
        return _DIST_CLS[spec.kind](**_lower(params))


def _lower(params: dict) -> dict:
    """Map template parameter names onto distribution constructor arguments."""
    rename = {"concentration": "concentration", "rate": "rate", "loc": "loc",
              "scale": "scale", "low": "low", "high": "high"}
    out = {}
    for k, v in params.items():
        if k not in rename:
            raise ConfigError(f"unknown distribution parameter '{k}'")
        out[rename[k]] = v
    return out


def prior_sample(template: GraphTemplate, desc: Descriptors,
                 rng: np.random.Generator, n: int | None = None) -> dict[str, np.ndarray]:
    """Ancestral draw of every RV (observed included); with n, a leading axis
    of n independent draws."""
    lead = () if n is None else (int(n),)
    values: dict[str, np.ndarray] = {}
    ground = _Grounding(template, desc, values, lead_rank=len(lead), traced=False)
    rv_by_name = {rv.name: rv for rv in template.rvs}
    for name in desc.topo_order:
        rv = rv_by_name[name]
        full = lead + desc.batch_shape(name) + desc.shape[name]
        if rv.dist.kind == "Normal":
            scale = ground.resolve(rv.dist.params["scale"], rv)
            if np.all(scale == 0.0):
                # degenerate test-only path: the draw collapses onto its mean
                loc = ground.resolve(rv.dist.params["loc"], rv)
                values[name] = np.broadcast_to(loc, full).copy()
                continue
        dist = ground.build(rv)
        values[name] = np.asarray(dist.sample(rng, full))
        if values[name].shape != full:
            values[name] = np.broadcast_to(values[name], full).copy()
    return values


def joint_log_prob(template: GraphTemplate, desc: Descriptors, values: dict) -> Tensor:
    """Sum of every RV's log density at the given grounded values.

    Values may carry extra leading axes (independent evaluations); those axes
    broadcast across RVs and survive in the output shape.  Out-of-support
    values contribute -inf rather than raising.
    """
    ground = _Grounding(template, desc, values, lead_rank=0, traced=True)
    rv_by_name = {rv.name: rv for rv in template.rvs}
    total = None
    for name in desc.rv_names:
        if name not in values:
            raise ConfigError(f"joint_log_prob: missing value for RV '{name}'")
        rv = rv_by_name[name]
        value = as_tensor(values[name])
        batch_rank = len(desc.batch_shape(name))
        event_rank = len(desc.shape[name])
        expect = desc.batch_shape(name) + desc.shape[name]
        got = value.shape[max(0, value.ndim - batch_rank - event_rank):]
        if got != expect:
            raise ConfigError(
                f"RV '{name}': trailing shape {got} does not match batch+event {expect}")
        dist = ground.build(rv)
        lp = dist.log_prob(value)
        reduce_rank = batch_rank + (event_rank if rv.dist.kind in _ELEMENTWISE else 0)
        if reduce_rank:
            lp = T.reduce_sum(lp, axis=tuple(range(-reduce_rank, 0)))
        total = lp if total is None else total + lp
    return total
