"""Time-dependent Lindblad master equation and its fixed-step RK4 integration.

The generator is

    drho/dt = -i[H(t), rho] + sum_a gamma_a (F_a rho F_a^+ - 1/2 {F_a^+ F_a, rho})

with the rates ``gamma_a`` kept separate from the jump operators (``gamma_a = 1``
recovers the absorbed-rate form). Time-dependent operators are plain callables
``t -> (N, N) array``. A callable marked with :func:`vectorized` also accepts a
1-D array of times and returns an ``(m, N, N)`` stack, which lets the
integrator evaluate a whole chunk of the time grid at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .algebra import dagger
from .errors import DimensionMismatch, StateInvariantViolated

__all__ = [
    "vectorized",
    "evaluate",
    "JumpChannel",
    "LindbladModel",
    "IntegratorConfig",
    "Trajectory",
    "lindblad_rhs",
    "integrate",
    "purity",
    "population",
    "state_diagnostics",
    "validate_density_matrix",
    "pure_state",
    "step_grid",
    "trace_distance",
]

OperatorFn = Callable[[float], np.ndarray]

# Time points evaluated per batch inside `integrate`.
_CHUNK_STEPS = 8192


def vectorized(fn):
    """Mark ``fn`` as accepting an array of times and returning a stacked result."""
    fn.vectorized = True
    return fn


def evaluate(fn: OperatorFn, times) -> np.ndarray:
    """Evaluate a time-dependent operator on every time in ``times`` -> ``(m, N, N)``."""
    times = np.asarray(times, dtype=float).reshape(-1)
    if getattr(fn, "vectorized", False):
        out = np.asarray(fn(times), dtype=complex)
        if out.ndim == 2:
            out = np.broadcast_to(out, (times.size,) + out.shape)
        return out
    return np.stack([np.asarray(fn(float(t)), dtype=complex) for t in times])


@dataclass(frozen=True)
class JumpChannel:
    """One dissipation channel: jump operator F(t), rate gamma, optional dF/dt."""

    operator: OperatorFn
    rate: float = 1.0
    derivative: OperatorFn | None = None

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError(f"rate must be non-negative, got {self.rate}")


@dataclass(frozen=True)
class LindbladModel:
    dim: int
    hamiltonian: OperatorFn
    channels: tuple[JumpChannel, ...] = ()
    breakpoints: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "breakpoints", tuple(sorted(float(b) for b in self.breakpoints)))
        h = evaluate(self.hamiltonian, [0.0])[0]
        if h.shape != (self.dim, self.dim):
            raise DimensionMismatch(f"H has shape {h.shape}, expected {(self.dim, self.dim)}")
        if np.max(np.abs(h - h.conj().T), initial=0.0) > 1e-10:
            raise ValueError("Hamiltonian is not Hermitian at t=0")
        for ch in self.channels:
            f = evaluate(ch.operator, [0.0])[0]
            if f.shape != (self.dim, self.dim):
                raise DimensionMismatch(f"jump operator has shape {f.shape}")

    @property
    def rates(self) -> np.ndarray:
        return np.array([ch.rate for ch in self.channels], dtype=float)

    def jumps(self, times) -> np.ndarray:
        """Jump operators on a time grid, shape ``(m, K, N, N)``."""
        times = np.asarray(times, dtype=float).reshape(-1)
        if not self.channels:
            return np.zeros((times.size, 0, self.dim, self.dim), dtype=complex)
        return np.stack([evaluate(ch.operator, times) for ch in self.channels], axis=1)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    renormalize_trace: bool = False
    record_every: int = 1
    invariant_tol: float = 1e-8

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    observables: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if not self.observables:
            self.observables = state_diagnostics(self.states)

    def __len__(self):
        return len(self.times)

    @property
    def purity(self) -> np.ndarray:
        return self.observables["purity"]

    def populations(self, kets) -> np.ndarray:
        """<v(t)|rho(t)|v(t)> where ``kets`` is a fixed ket or a callable of time."""
        if callable(kets):
            vs = evaluate(kets, self.times).reshape(len(self.times), -1)
        else:
            vs = np.broadcast_to(np.asarray(kets, dtype=complex), (len(self.times), self.states.shape[-1]))
        return np.real(np.einsum("ti,tij,tj->t", vs.conj(), self.states, vs))


def pure_state(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex).reshape(-1)
    v = v / np.linalg.norm(v)
    return np.outer(v, v.conj())


def purity(rho) -> float:
    rho = np.asarray(rho)
    return float(np.real(np.sum(rho * rho.T)))


def population(rho, v) -> float:
    rho = np.asarray(rho, dtype=complex)
    v = np.asarray(v, dtype=complex).reshape(-1)
    if v.shape[0] != rho.shape[0]:
        raise DimensionMismatch(f"ket has dimension {v.shape[0]}, state {rho.shape[0]}")
    return float(np.real(np.vdot(v, rho @ v)))


def state_diagnostics(states: np.ndarray) -> dict[str, np.ndarray]:
    """Per-state purity, trace deviation, Hermiticity deviation and smallest eigenvalue."""
    states = np.asarray(states)
    herm = 0.5 * (states + dagger(states))
    return {
        "purity": np.real(np.einsum("tij,tji->t", states, states)),
        "trace_dev": np.abs(np.trace(states, axis1=-2, axis2=-1) - 1.0),
        "herm_dev": np.max(np.abs(states - dagger(states)), axis=(-2, -1)),
        "min_eig": np.linalg.eigvalsh(herm)[..., 0],
    }


def validate_density_matrix(rho, tol: float = 1e-10) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionMismatch(f"density matrix must be square, got {rho.shape}")
    d = state_diagnostics(rho[None])
    if d["herm_dev"][0] > tol or d["trace_dev"][0] > tol or d["min_eig"][0] < -1e-8:
        raise StateInvariantViolated(
            f"invalid density matrix: trace_dev={d['trace_dev'][0]:.3g} "
            f"herm_dev={d['herm_dev'][0]:.3g} min_eig={d['min_eig'][0]:.3g}"
        )
    return rho


def lindblad_rhs(model: LindbladModel, t: float, rho) -> np.ndarray:
    """Right-hand side of the master equation at time ``t``."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (model.dim, model.dim):
        raise DimensionMismatch(f"state has shape {rho.shape}, model dim {model.dim}")
    h = evaluate(model.hamiltonian, [t])[0]
    out = -1j * (h @ rho - rho @ h)
    for ch in model.channels:
        f = evaluate(ch.operator, [t])[0]
        fd = f.conj().T
        fdf = fd @ f
        out += ch.rate * (f @ rho @ fd - 0.5 * (fdf @ rho + rho @ fdf))
    return out


@numba.njit(cache=True)
def _matmul(a, b, out):
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            acc = 0j
            for k in range(n):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc


@numba.njit(cache=True)
def _rhs_kernel(rho, keff, jumps, out, tmp, tmp2):
    # out = -i (K rho - rho K^+) + sum_a L_a rho L_a^+, K = H - (i/2) sum L^+ L
    n = rho.shape[0]
    _matmul(keff, rho, tmp)
    for i in range(n):
        for j in range(n):
            acc = 0j
            for k in range(n):
                acc += rho[i, k] * np.conj(keff[j, k])
            out[i, j] = -1j * (tmp[i, j] - acc)
    for a in range(jumps.shape[0]):
        _matmul(jumps[a], rho, tmp)
        for i in range(n):
            for j in range(n):
                acc = 0j
                for k in range(n):
                    acc += tmp[i, k] * np.conj(jumps[a, j, k])
                tmp2[i, j] = acc
        for i in range(n):
            for j in range(n):
                out[i, j] += tmp2[i, j]


@numba.njit(cache=True)
def _rk4_chunk(rho, keff, jumps, h, first_index, every, renorm, rec_states, rec_index):
    """Advance ``rho`` over (len(keff) - 1) / 2 steps; coefficients sampled at half steps."""
    n = rho.shape[0]
    k1 = np.empty((n, n), np.complex128)
    k2 = np.empty_like(k1)
    k3 = np.empty_like(k1)
    k4 = np.empty_like(k1)
    y = np.empty_like(k1)
    tmp = np.empty_like(k1)
    tmp2 = np.empty_like(k1)
    nsteps = (keff.shape[0] - 1) // 2
    nrec = 0
    for s in range(nsteps):
        i0 = 2 * s
        _rhs_kernel(rho, keff[i0], jumps[i0], k1, tmp, tmp2)
        y[:, :] = rho + 0.5 * h * k1
        _rhs_kernel(y, keff[i0 + 1], jumps[i0 + 1], k2, tmp, tmp2)
        y[:, :] = rho + 0.5 * h * k2
        _rhs_kernel(y, keff[i0 + 1], jumps[i0 + 1], k3, tmp, tmp2)
        y[:, :] = rho + h * k3
        _rhs_kernel(y, keff[i0 + 2], jumps[i0 + 2], k4, tmp, tmp2)
        rho[:, :] = rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if renorm:
            tr = 0j
            for i in range(n):
                tr += rho[i, i]
            rho[:, :] = rho / tr
        if (first_index + s + 1) % every == 0:
            rec_states[nrec] = rho
            rec_index[nrec] = s + 1
            nrec += 1
    return nrec


def _segments(t0: float, t1: float, breakpoints: Sequence[float]) -> list[tuple[float, float]]:
    cuts = [b for b in breakpoints if t0 < b < t1]
    edges = [t0, *cuts, t1]
    return list(zip(edges[:-1], edges[1:]))


def _half_step_times(a: float, b: float, nsteps: int) -> np.ndarray:
    times = a + (b - a) * np.arange(2 * nsteps + 1) / (2 * nsteps)
    # Segment ends are sampled one ulp inside so piecewise coefficients use one-sided limits.
    times[0] = np.nextafter(a, b)
    times[-1] = np.nextafter(b, a)
    return times


def step_grid(t0: float, t1: float, dt: float, breakpoints: Sequence[float] = ()):
    """Fixed-step grid split exactly at breakpoints: list of (start, end, nsteps, h)."""
    out = []
    for a, b in _segments(t0, t1, breakpoints):
        n = max(1, math.ceil((b - a) / dt - 1e-9))
        out.append((a, b, n, (b - a) / n))
    return out


def _effective_generators(model: LindbladModel, times: np.ndarray):
    h = evaluate(model.hamiltonian, times)
    herm = np.max(np.abs(h - dagger(h)))
    if herm > 1e-10:
        raise ValueError(f"Hamiltonian not Hermitian on the grid (deviation {herm:.3g})")
    jumps = model.jumps(times) * np.sqrt(model.rates)[None, :, None, None]
    keff = h - 0.5j * np.einsum("tkji,tkjl->til", jumps.conj(), jumps)
    return np.ascontiguousarray(keff), np.ascontiguousarray(jumps)


def integrate(model: LindbladModel, rho0, t0: float, t1: float, cfg: IntegratorConfig) -> Trajectory:
    """Integrate the master equation from ``t0`` to ``t1`` with classical RK4.

    Steps are split exactly at every model breakpoint inside ``(t0, t1)``.
    Recorded states (every ``cfg.record_every`` steps plus both end points) are
    checked for trace, Hermiticity and positivity; a violation beyond
    ``cfg.invariant_tol`` raises :class:`StateInvariantViolated`.
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    rho = np.array(validate_density_matrix(rho0), dtype=complex)
    if rho.shape != (model.dim, model.dim):
        raise DimensionMismatch(f"state has shape {rho.shape}, model dim {model.dim}")

    times_out = [t0]
    states_out = [rho.copy()]
    step_index = 0
    for a, b, nsteps, h in step_grid(t0, t1, cfg.dt, model.breakpoints):
        seg_times = _half_step_times(a, b, nsteps)
        for s0 in range(0, nsteps, _CHUNK_STEPS):
            s1 = min(nsteps, s0 + _CHUNK_STEPS)
            keff, jumps = _effective_generators(model, seg_times[2 * s0 : 2 * s1 + 1])
            rec = np.empty((s1 - s0, model.dim, model.dim), dtype=complex)
            idx = np.empty(s1 - s0, dtype=np.int64)
            nrec = _rk4_chunk(rho, keff, jumps, h, step_index, cfg.record_every, cfg.renormalize_trace, rec, idx)
            for k in range(nrec):
                j = s0 + idx[k]
                times_out.append(b if j == nsteps else a + j * h)
                states_out.append(rec[k])
            step_index += s1 - s0
    if times_out[-1] != t1:
        times_out.append(t1)
        states_out.append(rho.copy())

    traj = Trajectory(np.array(times_out), np.array(states_out))
    _check_trajectory(traj, cfg.invariant_tol)
    return traj


def _check_trajectory(traj: Trajectory, tol: float) -> None:
    obs = traj.observables
    for name, bad in (
        ("trace deviation", obs["trace_dev"] > tol),
        ("Hermiticity deviation", obs["herm_dev"] > tol),
        ("negative eigenvalue", obs["min_eig"] < -tol),
    ):
        if np.any(bad):
            k = int(np.argmax(bad))
            raise StateInvariantViolated(f"{name} at t={traj.times[k]:.6g} exceeds {tol:g}; reduce dt")


def trace_distance(rho, sigma) -> np.ndarray:
    """Half the trace norm of ``rho - sigma`` (batched over leading axes)."""
    d = np.asarray(rho) - np.asarray(sigma)
    d = 0.5 * (d + dagger(d))
    return 0.5 * np.sum(np.abs(np.linalg.eigvalsh(d)), axis=-1)
