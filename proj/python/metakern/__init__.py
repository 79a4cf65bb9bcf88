"""Infinite-width MTL and ANIL kernels for ReLU networks."""

from ._metakern import (
    MetakernError,
    command_names,
    compute_grampack,
    config_hash,
    kernel_inverse_gap,
    normalize_inputs,
    phi_damping,
    prediction_gap,
    relu_dual,
    run_command,
    sample_test_task,
    sample_training_set,
)

__all__ = [
    "MetakernError",
    "command_names",
    "compute_grampack",
    "config_hash",
    "kernel_inverse_gap",
    "normalize_inputs",
    "phi_damping",
    "prediction_gap",
    "relu_dual",
    "run_command",
    "sample_test_task",
    "sample_training_set",
]
