"""The two example systems: a Xi-type atom and a five-level toy model.

Both couple to broadband squeezed vacua whose squeezing phase rotates as
``phi = omega0 * t``, giving jump operators

    F(t) = cosh(r) S + exp(i omega0 t) sinh(r) S^+

Level ordering (matrix indices):

* Xi atom: ``|1>, |0>, |-1>``
* five-level model: ``|1>, |0>, |-1>, |1'>, |-1'>``

The decoherence-free basis is always the numerically computed joint kernel of
the jump operators (with exact time derivatives), never a hand-written ket.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .algebra import dagger, joint_eigenspaces
from .errors import EmptyKernel
from .lindblad import JumpChannel, LindbladModel, evaluate, vectorized
from .tdfs import DEFAULT_TOL, SubspaceTrajectory, kernel_segment, synthesized_hamiltonian

__all__ = [
    "ControlMode",
    "Transition",
    "SqueezedChannelSpec",
    "squeezed_channel",
    "dark_states",
    "xi_model",
    "five_level_model",
    "xi_ladder",
    "five_level_ladders",
    "paper_xi_fields",
    "paper_five_level_fields",
    "printed_dark_state_overlaps",
    "default_dt",
    "max_field_amplitude",
    "ModelBundle",
]


class ControlMode(str, enum.Enum):
    NO_CONTROL = "none"
    PAPER = "paper"
    SYNTHESIZED = "synthesized"


class Transition(str, enum.Enum):
    STEP = "step"
    ALWAYS = "always"


def _ket_bra(n: int, i: int, j: int) -> np.ndarray:
    m = np.zeros((n, n), dtype=complex)
    m[i, j] = 1.0
    return m


def xi_ladder() -> np.ndarray:
    """S = |1><0| + |0><-1| in the ordering |1>, |0>, |-1>."""
    return _ket_bra(3, 0, 1) + _ket_bra(3, 1, 2)


def five_level_ladders() -> tuple[np.ndarray, np.ndarray]:
    """S1 = |1><0| + |0><-1| and S2 = |1'><0| + |0><-1'|."""
    return _ket_bra(5, 0, 1) + _ket_bra(5, 1, 2), _ket_bra(5, 3, 1) + _ket_bra(5, 1, 4)


@dataclass(frozen=True)
class SqueezedChannelSpec:
    ladder: np.ndarray
    r: float
    omega0: float
    gamma: float = 1.0

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("squeezing amplitude r must be non-negative")
        if self.gamma < 0:
            raise ValueError("rate gamma must be non-negative")


def squeezed_channel(spec: SqueezedChannelSpec) -> JumpChannel:
    """Jump channel ``F(t) = S cosh r + exp(i omega0 t) S^+ sinh r`` with rate gamma."""
    s = np.asarray(spec.ladder, dtype=complex)
    a = math.cosh(spec.r) * s
    b = math.sinh(spec.r) * dagger(s)
    w = float(spec.omega0)

    @vectorized
    def operator(t):
        t = np.asarray(t, dtype=float)
        ph = np.exp(1j * w * t)
        return a + ph[..., None, None] * b

    @vectorized
    def derivative(t):
        t = np.asarray(t, dtype=float)
        ph = 1j * w * np.exp(1j * w * t)
        return ph[..., None, None] * b

    return JumpChannel(operator, spec.gamma, derivative)


def dark_states(channels: Sequence[JumpChannel], t: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Orthonormal basis (columns) of the joint kernel of all jump operators at ``t``."""
    if not channels:
        raise ValueError("need at least one channel")
    ops = [evaluate(ch.operator, [t])[0] for ch in channels]
    for tup, basis in joint_eigenspaces(ops, tol):
        if all(abs(c) <= tol for c in tup):
            return basis
    raise EmptyKernel(f"no common dark state at t={t:g}")


def _stacked_constraint(channels: Sequence[JumpChannel], extra_rows: np.ndarray | None = None):
    """Vectorized ``A(t)`` stacking all jump operators (plus constant rows) and ``dA/dt``."""
    n = evaluate(channels[0].operator, [0.0]).shape[-1]
    extra = np.zeros((0, n), dtype=complex) if extra_rows is None else np.asarray(extra_rows, dtype=complex)

    @vectorized
    def constraint(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        blocks = [evaluate(ch.operator, t) for ch in channels]
        blocks.append(np.broadcast_to(extra, (t.size,) + extra.shape))
        return np.concatenate(blocks, axis=-2)

    @vectorized
    def derivative(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        blocks = [evaluate(ch.derivative, t) for ch in channels]
        blocks.append(np.zeros((t.size,) + extra.shape, dtype=complex))
        return np.concatenate(blocks, axis=-2)

    has_derivs = all(ch.derivative is not None for ch in channels)
    return constraint, derivative if has_derivs else None


@dataclass(frozen=True)
class ModelBundle:
    """A model, its t-DFS trajectory and the bookkeeping needed to run it."""

    model: LindbladModel
    subspace: SubspaceTrajectory
    omega0: float
    name: str
    dark_kets: object  # vectorized callable t -> (N, n_dark) columns

    def initial_state(self, t: float = 0.0) -> np.ndarray:
        """Projector on the first subspace basis vector at ``t``."""
        v = evaluate(self.subspace.segment(t).basis, [t])[0][:, 0]
        return np.outer(v, v.conj())


# ---------------------------------------------------------------------------
# printed control fields


def paper_xi_fields(r: float, omega0: float, t):
    """Omega_1, Omega_2, Omega_3 of the printed Xi-atom control schedule."""
    t = np.asarray(t, dtype=float)
    ph = np.exp(1j * omega0 * t)
    o1 = math.cosh(r) * ph
    o2 = math.sinh(r) * np.ones_like(ph)
    o3 = omega0 * math.sinh(r) * math.cosh(r) * ph
    return o1, o2, o3


def paper_five_level_fields(r1: float, r2: float, omega0: float, t, omega2_variant: str = "printed"):
    """Omega_1..3 and Omega'_1..3 of the printed five-level schedule.

    ``omega2_variant="halved"`` uses (1 + cos 2 omega0 t)/2 on the ramp, which
    is continuous at both ends; ``"printed"`` keeps the factor as printed.
    """
    t = np.asarray(t, dtype=float)
    ph = np.exp(1j * omega0 * t)
    t_half, t_b = 0.5 * math.pi / omega0, math.pi / omega0
    o1 = math.cosh(r1) * ph
    o2 = math.sinh(r1) * np.ones_like(ph)
    o3 = omega0 * math.sinh(r1) * math.cosh(r1) * np.conj(ph)
    p1 = math.cosh(r2) * ph
    ramp = 1 + np.cos(2 * omega0 * t)
    if omega2_variant == "halved":
        ramp = 0.5 * ramp
    elif omega2_variant != "printed":
        raise ValueError(f"unknown omega2_variant {omega2_variant!r}")
    p2 = np.where(t < t_half, 0.0, np.where(t <= t_b, ramp * math.sinh(r2), math.sinh(r2))) + 0j
    p3 = omega0 * math.sinh(r2) * math.cosh(r2) * np.conj(ph)
    return o1, o2, o3, p1, p2, p3


def _hermitian_from_upper(n: int, entries: dict[tuple[int, int], np.ndarray], m: int) -> np.ndarray:
    h = np.zeros((m, n, n), dtype=complex)
    for (i, j), val in entries.items():
        h[:, i, j] += val
    return h + dagger(h)


def printed_dark_state_overlaps(r: float, phi: float, computed) -> dict[str, float]:
    """|<printed|computed>| for the printed dark ket and its |1> <-> |-1> swapped variant."""
    c = math.cosh(r) / math.sqrt(math.cosh(2 * r))
    s = math.sinh(r) / math.sqrt(math.cosh(2 * r))
    e = np.exp(1j * phi)
    printed = np.array([-e * s, 0, c])  # c|-1> - e^{i phi} s|1>
    swapped = np.array([c, 0, -e * s])  # roles of |1> and |-1> exchanged
    v = np.asarray(computed, dtype=complex).reshape(-1)
    return {"printed": float(abs(np.vdot(printed, v))), "swapped": float(abs(np.vdot(swapped, v)))}


# ---------------------------------------------------------------------------
# model constructors


def xi_model(
    r: float,
    omega0: float,
    gamma: float = 1.0,
    mode: ControlMode | str = ControlMode.SYNTHESIZED,
    freeze_fields: bool = False,
    tol: float = DEFAULT_TOL,
) -> ModelBundle:
    """Xi-type three-level atom in a phase-rotating squeezed vacuum.

    The t-DFS is the single dark state of the squeezed channel. ``mode``
    selects the Hamiltonian: none, the printed fields, or the synthesized
    control. ``freeze_fields`` holds the printed fields at their t=0 values.
    """
    mode = ControlMode(mode)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    channel = squeezed_channel(SqueezedChannelSpec(xi_ladder(), r, omega0, gamma))
    constraint, dconstraint = _stacked_constraint([channel])
    seg = kernel_segment(constraint, dconstraint, 3, 0.0, tol=tol)
    sub = SubspaceTrajectory(3, (seg,))

    if mode is ControlMode.NO_CONTROL:
        hamiltonian = vectorized(lambda t: np.zeros((np.size(t), 3, 3), dtype=complex))
    elif mode is ControlMode.PAPER:

        @vectorized
        def hamiltonian(t):
            t = np.atleast_1d(np.asarray(t, dtype=float))
            o1, o2, o3 = paper_xi_fields(r, omega0, np.zeros_like(t) if freeze_fields else t)
            return _hermitian_from_upper(3, {(0, 1): o1, (1, 2): o2, (0, 2): o3}, t.size)

    else:
        hamiltonian = synthesized_hamiltonian((channel,), sub, tol=tol)

    model = LindbladModel(3, hamiltonian, (channel,))
    return ModelBundle(model, sub, omega0, "xi", seg.basis)


def five_level_model(
    r1: float = 1.0,
    r2: float = 1.0,
    omega0: float = 1.0,
    gamma1: float = 1.0,
    gamma2: float = 1.0,
    Omega: float = 1.0,
    transition: Transition | str = Transition.STEP,
    mode: ControlMode | str = ControlMode.SYNTHESIZED,
    omega2_variant: str = "printed",
    tol: float = DEFAULT_TOL,
) -> ModelBundle:
    """Five-level model whose t-DFS grows from one to two dimensions at omega0 t = pi.

    The Hamiltonian is ``H0(mode) + T(t) Omega (|DF1><DF2| + h.c.)`` with
    ``T = theta(omega0 t - pi)`` (``transition="step"``) or ``T = 1``.
    """
    mode, transition = ControlMode(mode), Transition(transition)
    if min(omega0, gamma1, gamma2) <= 0:
        raise ValueError("omega0 and rates must be positive")
    s1, s2 = five_level_ladders()
    channels = (
        squeezed_channel(SqueezedChannelSpec(s1, r1, omega0, gamma1)),
        squeezed_channel(SqueezedChannelSpec(s2, r2, omega0, gamma2)),
    )
    t_b = math.pi / omega0
    primed_rows = np.zeros((2, 5), dtype=complex)
    primed_rows[0, 3] = primed_rows[1, 4] = 1.0
    c1, d1 = _stacked_constraint(channels, primed_rows)
    c2, d2 = _stacked_constraint(channels)
    seg1 = kernel_segment(c1, d1, 5, 0.0, t_b, tol=tol)
    seg2 = kernel_segment(c2, d2, 5, t_b, tol=tol)
    sub = SubspaceTrajectory(5, (seg1, seg2))
    dark_pair = seg2.basis  # columns DF1, DF2 at any time

    @vectorized
    def transition_term(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        kets = evaluate(dark_pair, t)
        flip = kets[..., :, 0:1] @ dagger(kets[..., :, 1:2])
        on = (t > t_b) if transition is Transition.STEP else np.ones_like(t, dtype=bool)
        return Omega * on[:, None, None] * (flip + dagger(flip))

    breakpoints = [t_b]
    if mode is ControlMode.NO_CONTROL:
        hamiltonian = transition_term
    elif mode is ControlMode.PAPER:
        breakpoints.append(0.5 * math.pi / omega0)

        @vectorized
        def hamiltonian(t):
            t = np.atleast_1d(np.asarray(t, dtype=float))
            o1, o2, o3, p1, p2, p3 = paper_five_level_fields(r1, r2, omega0, t, omega2_variant)
            h0 = _hermitian_from_upper(
                5, {(0, 1): o1, (1, 2): o2, (0, 2): o3, (3, 1): p1, (1, 4): p2, (3, 4): p3}, t.size
            )
            return h0 + transition_term(t)

    else:
        hamiltonian = synthesized_hamiltonian(channels, sub, extra=transition_term, tol=tol)

    model = LindbladModel(5, hamiltonian, channels, tuple(breakpoints))
    return ModelBundle(model, sub, omega0, "five_level", dark_pair)


def max_field_amplitude(model: LindbladModel, t0: float, t1: float, samples: int = 513) -> float:
    """Largest |H_ij(t)| over an evenly spaced sample of ``[t0, t1]``."""
    h = evaluate(model.hamiltonian, np.linspace(t0, t1, samples))
    return float(np.max(np.abs(h)))


def default_dt(model: LindbladModel, omega0: float, t0: float, t1: float) -> float:
    """1e-3 times the fastest time scale among the rates, omega0 and the field amplitudes."""
    rates = [g for g in model.rates if g > 0]
    scales = rates + [abs(omega0), max_field_amplitude(model, t0, t1)]
    fastest = max([s for s in scales if s > 0], default=1.0)
    return 1e-3 / fastest
