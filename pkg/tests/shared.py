"""Expensive experiment runs shared by several test modules (computed once per session)."""
from functools import lru_cache

from rnavelo import recipes


@lru_cache(maxsize=None)
def coverage(stage):
    return recipes.coverage_experiment(stage, n_reps=100)


@lru_cache(maxsize=None)
def pseudotime():
    return recipes.pseudotime_experiment()


@lru_cache(maxsize=None)
def bifurcation():
    return recipes.bifurcation_experiment()


@lru_cache(maxsize=None)
def rescale_run():
    return recipes.rescale_experiment(0)


@lru_cache(maxsize=None)
def sweep():
    return recipes.sweep_experiment()


@lru_cache(maxsize=None)
def gamma_bias():
    return recipes.gamma_bias_experiment()
