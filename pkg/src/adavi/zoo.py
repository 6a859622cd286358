"""Built-in model templates used throughout training, evaluation and tests."""

from __future__ import annotations

from .errors import ConfigError
from .hbm import DistSpec, GraphTemplate, Param, Plate, RVSpec


def nc_template(n_obs: int = 10, dim: int = 2) -> GraphTemplate:
    """Non-conjugate pair: Gamma-distributed location of a Laplace likelihood."""
    return GraphTemplate(
        name="nc",
        plates=[Plate("draws", 0, n_obs)],
        constants={"loc_rate": 0.5, "obs_scale": 0.3},
        rvs=[
            RVSpec(
                name="loc",
                dist=DistSpec("Gamma", {
                    "concentration": Param(value=(1.0,) * dim),
                    "rate": Param(const="loc_rate"),
                }),
                plates=(),
                event_shape=(dim,),
                link="exp",
            ),
            RVSpec(
                name="obs",
                dist=DistSpec("Laplace", {
                    "loc": Param(parent="loc"),
                    "scale": Param(const="obs_scale"),
                }),
                plates=("draws",),
                event_shape=(dim,),
                observed=True,
            ),
        ],
    )


def gre_template(n_groups: int = 3, n_obs: int = 50, dim: int = 2) -> GraphTemplate:
    """Gaussian random effects: population mean, per-group means, observations."""
    return GraphTemplate(
        name="gre",
        plates=[Plate("draws", 0, n_obs), Plate("groups", 1, n_groups)],
        constants={"pop_scale": 1.0, "group_scale": 0.2, "obs_scale": 0.05},
        rvs=[
            RVSpec(
                name="pop_mean",
                dist=DistSpec("Normal", {
                    "loc": Param(value=0.0),
                    "scale": Param(const="pop_scale"),
                }),
                plates=(),
                event_shape=(dim,),
            ),
            RVSpec(
                name="group_means",
                dist=DistSpec("Normal", {
                    "loc": Param(parent="pop_mean"),
                    "scale": Param(const="group_scale"),
                }),
                plates=("groups",),
                event_shape=(dim,),
            ),
            RVSpec(
                name="obs",
                dist=DistSpec("Normal", {
                    "loc": Param(parent="group_means"),
                    "scale": Param(const="obs_scale"),
                }),
                plates=("draws", "groups"),
                event_shape=(dim,),
                observed=True,
            ),
        ],
    )


def gm_template(n_groups: int = 3, n_comp: int = 3, dim: int = 2,
                n_obs: int = 50) -> GraphTemplate:
    """Gaussian mixtures with group-level component means and weights."""
    return GraphTemplate(
        name="gm",
        plates=[Plate("draws", 0, n_obs), Plate("groups", 1, n_groups)],
        constants={"pop_scale": 1.0, "group_scale": 0.2, "obs_scale": 0.05},
        rvs=[
            RVSpec(
                name="comp_means",
                dist=DistSpec("Normal", {
                    "loc": Param(value=0.0),
                    "scale": Param(const="pop_scale"),
                }),
                plates=(),
                event_shape=(n_comp, dim),
                link="reshape",
            ),
            RVSpec(
                name="group_comp_means",
                dist=DistSpec("Normal", {
                    "loc": Param(parent="comp_means"),
                    "scale": Param(const="group_scale"),
                }),
                plates=("groups",),
                event_shape=(n_comp, dim),
                link="reshape",
            ),
            RVSpec(
                name="weights",
                dist=DistSpec("Dirichlet", {
                    "concentration": Param(value=(1.0,) * n_comp),
                }),
                plates=("groups",),
                event_shape=(n_comp,),
                link="softmax_centered",
            ),
            RVSpec(
                name="obs",
                dist=DistSpec(
                    "Mixture",
                    {"weights": Param(parent="weights")},
                    component=DistSpec("Normal", {
                        "loc": Param(parent="group_comp_means"),
                        "scale": Param(const="obs_scale"),
                    }),
                ),
                plates=("draws", "groups"),
                event_shape=(dim,),
                observed=True,
            ),
        ],
    )


def get(name: str, **overrides) -> GraphTemplate:
    builders = {"nc": nc_template, "gre": gre_template, "gm": gm_template}
    if name not in builders:
        raise ConfigError(f"unknown model '{name}' (expected one of {sorted(builders)})")
    return builders[name](**overrides)
