"""Context-free language modeling tasks."""
from .cfl import (
    CONDITIONINGS,
    DEFAULT_TEST_SEED,
    EXACT,
    MASS,
    RANGE,
    TASK_NAMES,
    Dataset,
    MetricResult,
    OracleModel,
    TaskSpec,
    binned_differences,
    binned_test_eval,
    cross_entropy_difference,
    exact_length_logprob,
    exact_length_logprobs,
    load_dataset,
    make_task,
    per_string_differences,
    sample_dataset,
    sample_test_set,
    save_dataset,
    true_logprob,
    true_logprobs,
)
from .grammar import WILDCARD, Pcfg, inside_logprob, length_mass, sample_conditioned
