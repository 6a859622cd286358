"""Amortized variational inference for pyramidal hierarchical Bayesian models.

Builds a dual variational family (hierarchical set-transformer encoder plus
conditional normalizing flows) automatically from a model template, with a
weight count independent of plate cardinalities.
"""

__version__ = "0.1.0"
