"""Lindblad dynamics with time-dependent decoherence-free subspaces."""

from .algebra import gram_schmidt, joint_eigenspaces, matrix_exponential
from .lindblad import (
    IntegratorConfig,
    JumpChannel,
    LindbladModel,
    Trajectory,
    integrate,
    lindblad_rhs,
    population,
    purity,
)
from .models import ControlMode, Transition, dark_states, five_level_model, squeezed_channel, xi_model
from .tdfs import (
    DfsReport,
    SubspaceTrajectory,
    check_eigencondition,
    check_invariance,
    effective_hamiltonian,
    frame_propagate,
    frame_unitary,
    gauge_operator,
    synthesize_control,
    verify_tdfs,
)

__version__ = "0.1.0"
