"""Cavity cat-state production by continuous QND photon-number measurement
and coherent-displacement feedback: stochastic-master-equation trajectories,
the five-stage feedback protocol, a semi-analytic crescent-state model of the
probing statistics, and an optimal two-component overlap fidelity."""

from .fock import (
    FockSpace,
    OperatorSet,
    build_operator_set,
    fock_state,
    coherent_state,
    displaced_squeezed_state,
    density_matrix,
    expectation,
    apply_displacement,
    husimi_q,
    husimi_grid,
    max_q_on_p_axis,
)

__all__ = [
    "FockSpace",
    "OperatorSet",
    "build_operator_set",
    "fock_state",
    "coherent_state",
    "displaced_squeezed_state",
    "density_matrix",
    "expectation",
    "apply_displacement",
    "husimi_q",
    "husimi_grid",
    "max_q_on_p_axis",
]

__version__ = "0.1.0"
