"""Differentiable stacks and their brute-force oracle."""
from .superposition import (
    SuperpositionState,
    sup_init,
    sup_reading,
    sup_update,
    superposition_readings,
)
from .vpda import (
    VpdaConfig,
    VpdaFunction,
    VpdaState,
    split_transitions,
    vpda_init,
    vpda_reading,
    vpda_readings,
    vpda_update,
)
from .runs import VpdaRun, enumerate_runs, oracle_reading

__all__ = [
    "SuperpositionState",
    "VpdaConfig",
    "VpdaFunction",
    "VpdaRun",
    "VpdaState",
    "enumerate_runs",
    "oracle_reading",
    "split_transitions",
    "sup_init",
    "sup_reading",
    "sup_update",
    "superposition_readings",
    "vpda_init",
    "vpda_reading",
    "vpda_readings",
    "vpda_update",
]
