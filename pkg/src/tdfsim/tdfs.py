"""Time-dependent decoherence-free subspaces: frames, conditions, control synthesis.

A :class:`SubspaceTrajectory` is a piecewise description of a moving subspace.
Each :class:`FrameSegment` has a fixed dimension ``M`` and supplies, for any
time in the segment, an orthonormal basis ``Phi(t)`` (``N x M`` columns), a
complement ``C(t)`` (``N x (N - M)``) and optionally their time derivatives.
Frames are re-anchored at the start of each segment, so the moving-frame
unitary is ``U(t) = E(t_a) E(t)^+`` with ``E = [Phi | C]`` and ``t_a`` the
segment start.

All functions accept a scalar time or a 1-D array of times; array input gives
stacked output along a leading axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np

from .algebra import choose_pivots, dagger, matrix_exponential, orthonormality_error, projector_basis
from .errors import (
    ConditionsViolated,
    DerivativeUnavailable,
    DimensionChangeCrossed,
    DimensionMismatch,
    EigenconditionViolated,
    EmptyKernel,
)
from .lindblad import (
    IntegratorConfig,
    JumpChannel,
    LindbladModel,
    Trajectory,
    evaluate,
    step_grid,
    validate_density_matrix,
    vectorized,
)

__all__ = [
    "FrameSegment",
    "SubspaceTrajectory",
    "kernel_segment",
    "static_subspace",
    "frame_unitary",
    "gauge_operator",
    "effective_hamiltonian",
    "check_eigencondition",
    "check_invariance",
    "synthesize_control",
    "synthesized_hamiltonian",
    "frame_propagate",
    "verify_tdfs",
    "DfsReport",
    "EigenconditionResult",
]

DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class FrameSegment:
    """Constant-dimension piece of a subspace trajectory on ``[start, end]``."""

    start: float
    end: float
    dim: int
    dimension: int
    basis: Callable
    complement: Callable
    basis_derivative: Callable | None = None
    complement_derivative: Callable | None = None
    # optional t -> (E, dE/dt) evaluated in one pass
    frame_with_derivative: Callable | None = None

    @property
    def analytic(self) -> bool:
        return self.basis_derivative is not None and self.complement_derivative is not None


@dataclass(frozen=True)
class SubspaceTrajectory:
    """Piecewise-constant-dimension moving subspace.

    ``fd_step`` switches every derivative to central differences with that
    step; it is also the fallback for segments without analytic derivatives.
    A time equal to a segment boundary belongs to the earlier segment.
    """

    dim: int
    segments: tuple[FrameSegment, ...]
    fd_step: float | None = None

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("need at least one segment")
        for a, b in zip(segs[:-1], segs[1:]):
            if not a.end == b.start:
                raise ValueError("segments must be contiguous")
        for s in segs:
            if not 1 <= s.dimension <= self.dim - 1:
                raise ValueError(f"subspace dimension {s.dimension} outside [1, {self.dim - 1}]")
            if s.dim != self.dim:
                raise DimensionMismatch("segment dimension differs from trajectory")

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return tuple(s.end for s in self.segments[:-1])

    def segment_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        ends = np.array([s.end for s in self.segments[:-1]])
        return np.searchsorted(ends, t, side="left")

    def segment(self, t: float) -> FrameSegment:
        return self.segments[int(self.segment_index(t))]

    def dimension_at(self, t: float) -> int:
        return self.segment(t).dimension

    def with_finite_differences(self, h: float) -> "SubspaceTrajectory":
        return SubspaceTrajectory(self.dim, self.segments, fd_step=h)


def _scalar_or_array(t):
    arr = np.asarray(t, dtype=float)
    return arr.reshape(-1), arr.ndim == 0


def _by_segment(sub: SubspaceTrajectory, times: np.ndarray):
    """Yield ``(segment, index_array)`` for the times falling in each segment."""
    idx = sub.segment_index(times)
    for k, seg in enumerate(sub.segments):
        sel = np.nonzero(idx == k)[0]
        if sel.size:
            yield seg, sel


def _frame(seg: FrameSegment, times: np.ndarray) -> np.ndarray:
    """Full orthonormal frame ``E(t) = [Phi | C]``, shape ``(m, N, N)``."""
    return np.concatenate([evaluate(seg.basis, times), evaluate(seg.complement, times)], axis=-1)


def _frame_derivative(sub: SubspaceTrajectory, seg: FrameSegment, times: np.ndarray) -> np.ndarray:
    h = sub.fd_step
    if h is None and seg.analytic:
        return np.concatenate(
            [evaluate(seg.basis_derivative, times), evaluate(seg.complement_derivative, times)], axis=-1
        )
    if h is None:
        raise DerivativeUnavailable("segment has no analytic derivative and no finite-difference step")
    if np.any(times - h < seg.start) or np.any(times + h > seg.end):
        raise DerivativeUnavailable(f"central difference with h={h:g} leaves segment [{seg.start:g}, {seg.end:g}]")
    return (_frame(seg, times + h) - _frame(seg, times - h)) / (2 * h)


def _frame_and_derivative(sub: SubspaceTrajectory, seg: FrameSegment, times: np.ndarray):
    if sub.fd_step is None and seg.frame_with_derivative is not None:
        return seg.frame_with_derivative(times)
    return _frame(seg, times), _frame_derivative(sub, seg, times)


def _split_frame(seg: FrameSegment, e: np.ndarray):
    return e[..., : seg.dimension], e[..., seg.dimension :]


# ---------------------------------------------------------------------------
# frame construction


def static_subspace(basis, complement=None, start: float = 0.0) -> SubspaceTrajectory:
    """Time-independent subspace; the complement defaults to a pivoted completion."""
    phi = np.array(basis, dtype=complex)
    if phi.ndim == 1:
        phi = phi[:, None]
    n, m = phi.shape
    if complement is None:
        q = np.eye(n) - phi @ dagger(phi)
        complement = projector_basis(q, choose_pivots(q, n - m))
    comp = np.array(complement, dtype=complex)

    @vectorized
    def const_basis(t):
        return np.broadcast_to(phi, (np.size(t), n, m))

    @vectorized
    def const_comp(t):
        return np.broadcast_to(comp, (np.size(t), n, n - m))

    @vectorized
    def zero_b(t):
        return np.zeros((np.size(t), n, m), dtype=complex)

    @vectorized
    def zero_c(t):
        return np.zeros((np.size(t), n, n - m), dtype=complex)

    seg = FrameSegment(start, math.inf, n, m, const_basis, const_comp, zero_b, zero_c)
    return SubspaceTrajectory(n, (seg,))


def _qr_derivative(q: np.ndarray, r: np.ndarray, adot: np.ndarray) -> np.ndarray:
    """d/dt of the Q factor of A = QR with real positive diag(R), given dA/dt (batched)."""
    rinv = np.linalg.inv(r)
    x = dagger(q) @ adot @ rinv
    low = np.tril(x, -1)
    omega = low - dagger(low)
    diag = 1j * np.imag(np.diagonal(x, axis1=-2, axis2=-1))
    omega = omega + diag[..., :, None] * np.eye(x.shape[-1])
    return q @ omega + adot @ rinv - q @ (dagger(q) @ adot @ rinv)


def _positive_qr(a: np.ndarray):
    q, r = np.linalg.qr(a)
    d = np.diagonal(r, axis1=-2, axis2=-1)
    ph = d / np.abs(d)
    q = q * ph[..., None, :]
    r = np.conj(ph)[..., :, None] * r
    return q, r


def _kernel_projector(a: np.ndarray, adot: np.ndarray | None, rank: int):
    """Projector onto ker(a) and its derivative for constant ``rank`` (batched).

    Uses the Hermitian eigendecomposition of ``a^+ a``; the kernel is separated
    from the rest of the spectrum by the squared smallest non-zero singular value.
    """
    ah = dagger(a)
    lam, v = np.linalg.eigh(ah @ a)
    n = v.shape[-1]
    vk = v[..., : n - rank]
    p = vk @ dagger(vk)
    if adot is None:
        return p, None
    vr = v[..., n - rank :]
    # a^+ (pseudo-inverse) = V_r diag(1/lam_r) V_r^+ a^dagger
    pinv = (vr / lam[..., None, n - rank :]) @ dagger(vr) @ ah
    x = pinv @ adot @ p
    return p, -(x + dagger(x))


def kernel_segment(
    constraint: Callable,
    constraint_derivative: Callable | None,
    dim: int,
    start: float,
    end: float = math.inf,
    tol: float = DEFAULT_TOL,
) -> FrameSegment:
    """Segment whose subspace is the kernel of a stacked constraint matrix ``A(t)``.

    ``constraint(t)`` returns ``(R, N)`` (or a stack for vectorized callables).
    The basis is the pivoted Gram-Schmidt of the kernel projector columns with
    pivots fixed at ``start``; the complement is the nearest orthonormal set to
    the projection of the start-time complement. With ``constraint_derivative``
    both come with exact derivatives.
    """
    a0 = evaluate(constraint, [start])[0]
    s0 = np.linalg.svd(a0, compute_uv=False)
    rank = int(np.sum(s0 > tol))
    m = dim - rank
    if m == 0:
        raise EmptyKernel(f"constraint has trivial kernel at t={start:g}")
    p0, _ = _kernel_projector(a0, None, rank)
    pivots = choose_pivots(p0, m)
    q0 = np.eye(dim) - p0
    comp0 = projector_basis(q0, choose_pivots(q0, rank))

    # The synthesizer, the frame and the checks usually ask for the same grid
    # back to back; remember the last few projector evaluations.
    cache: dict = {}

    def pieces(times):
        times = np.asarray(times, dtype=float).reshape(-1)
        key = (times.size, hash(times.tobytes()))
        hit = cache.get(key)
        if hit is not None and np.array_equal(hit[0], times):
            return hit[1]
        a = evaluate(constraint, times)
        adot = evaluate(constraint_derivative, times) if constraint_derivative is not None else None
        p, pdot = _kernel_projector(a, adot, rank)
        for arr in (p, pdot):
            if arr is not None:
                arr.flags.writeable = False
        if len(cache) >= 4:
            cache.pop(next(iter(cache)))
        cache[key] = (times.copy(), (p, pdot))
        return p, pdot

    @vectorized
    def basis(t):
        p, _ = pieces(t)
        return projector_basis(p, pivots)

    @vectorized
    def complement(t):
        p, _ = pieces(t)
        b = comp0 - p @ comp0
        return _lowdin(b)[0]

    if constraint_derivative is None:
        return FrameSegment(start, end, dim, m, basis, complement)

    @vectorized
    def basis_derivative(t):
        p, pdot = pieces(t)
        q, r = _positive_qr(p[..., :, pivots])
        return _qr_derivative(q, r, pdot[..., :, pivots])

    @vectorized
    def complement_derivative(t):
        p, pdot = pieces(t)
        b = comp0 - p @ comp0
        return _lowdin(b, -pdot @ comp0)[1]

    def joint(t):
        p, pdot = pieces(t)
        q, r = _positive_qr(p[..., :, pivots])
        qdot = _qr_derivative(q, r, pdot[..., :, pivots])
        c, cdot = _lowdin(comp0 - p @ comp0, -pdot @ comp0)
        return np.concatenate([q, c], axis=-1), np.concatenate([qdot, cdot], axis=-1)

    return FrameSegment(start, end, dim, m, basis, complement, basis_derivative, complement_derivative, joint)


def _lowdin(b: np.ndarray, bdot: np.ndarray | None = None):
    """Nearest orthonormal columns ``B (B^+ B)^{-1/2}`` and optionally their derivative."""
    s = dagger(b) @ b
    lam, v = np.linalg.eigh(s)
    isq = (v / np.sqrt(lam)[..., None, :]) @ dagger(v)
    c = b @ isq
    if bdot is None:
        return c, None
    sdot = dagger(bdot) @ b + dagger(b) @ bdot
    st = dagger(v) @ sdot @ v
    r = np.sqrt(lam)
    # divided differences of x -> x^{-1/2}
    dd = -1.0 / (r[..., :, None] * r[..., None, :] * (r[..., :, None] + r[..., None, :]))
    disq = v @ (st * dd) @ dagger(v)
    return c, bdot @ isq + b @ disq


# ---------------------------------------------------------------------------
# frame operators


def frame_unitary(sub: SubspaceTrajectory, t, anchor: float | None = None) -> np.ndarray:
    """``U(t) = sum_k |e_k(anchor)><e_k(t)|`` over basis and complement.

    ``anchor`` defaults to the start of the segment containing ``t``; an anchor
    in a segment of different dimension raises :class:`DimensionChangeCrossed`.
    """
    times, scalar = _scalar_or_array(t)
    out = np.empty((times.size, sub.dim, sub.dim), dtype=complex)
    for seg, sel in _by_segment(sub, times):
        if anchor is None:
            ea = _frame(seg, np.array([seg.start]))[0]
        else:
            lo, hi = min(anchor, times[sel].min()), max(anchor, times[sel].max())
            idx = range(int(sub.segment_index(lo)), int(sub.segment_index(hi)) + 1)
            if any(sub.segments[k].dimension != seg.dimension for k in idx):
                raise DimensionChangeCrossed(f"subspace dimension changes between t={anchor:g} and the requested times")
            ea = _frame(sub.segment(anchor), np.array([anchor]))[0]
        out[sel] = ea @ dagger(_frame(seg, times[sel]))
    return out[0] if scalar else out


def gauge_operator(sub: SubspaceTrajectory, t) -> np.ndarray:
    """``G(t) = i U^+(t) dU/dt``, equal to ``i E(t) dE/dt^+`` for the moving frame E."""
    times, scalar = _scalar_or_array(t)
    out = np.empty((times.size, sub.dim, sub.dim), dtype=complex)
    for seg, sel in _by_segment(sub, times):
        ts = times[sel]
        if sub.fd_step is None and seg.analytic:
            e, edot = _frame_and_derivative(sub, seg, ts)
            out[sel] = 1j * e @ dagger(edot)
        else:
            h = sub.fd_step
            if h is None:
                raise DerivativeUnavailable("no analytic derivative and no finite-difference step")
            if np.any(ts - h < seg.start) or np.any(ts + h > seg.end):
                raise DerivativeUnavailable(f"central difference with h={h:g} leaves the segment")
            ea = _frame(seg, np.array([seg.start]))[0]
            u = ea @ dagger(_frame(seg, ts))
            udot = (ea @ dagger(_frame(seg, ts + h)) - ea @ dagger(_frame(seg, ts - h))) / (2 * h)
            out[sel] = 1j * dagger(u) @ udot
    return out[0] if scalar else out


@dataclass
class EigenconditionResult:
    eigenvalues: np.ndarray  # (K,) or (m, K)
    residual: np.ndarray | float
    spread: np.ndarray | float


def _eigencondition(jumps: np.ndarray, phi: np.ndarray):
    """Eigenvalue estimates from the first basis vector, residuals and spread (batched)."""
    fphi = jumps @ phi[:, None]  # (m, K, N, M)
    diag = np.einsum("tnj,tknj->tkj", phi.conj(), fphi)  # <Phi_j|F_k|Phi_j>
    c = diag[..., 0]
    res = np.linalg.norm(fphi - c[..., None, None] * phi[:, None], axis=-2)
    spread = np.abs(diag - c[..., None])
    k = jumps.shape[1]
    if k == 0:
        z = np.zeros(phi.shape[0])
        return c, z, z
    return c, res.max(axis=(-2, -1)), spread.max(axis=(-2, -1))


def check_eigencondition(model: LindbladModel, sub: SubspaceTrajectory, t, tol: float = DEFAULT_TOL):
    """Estimate ``c_a(t)`` and measure how far the basis is from common eigenvectors.

    ``c_a`` is read from the first basis vector; ``residual`` is
    ``max_{j,a} ||F_a Phi_j - c_a Phi_j||`` and ``spread`` is
    ``max_{j,a} |<Phi_j|F_a|Phi_j> - c_a|``. Never raises on a failed check.
    """
    times, scalar = _scalar_or_array(t)
    k = len(model.channels)
    c = np.zeros((times.size, k), dtype=complex)
    res = np.zeros(times.size)
    spread = np.zeros(times.size)
    jumps = model.jumps(times)
    for seg, sel in _by_segment(sub, times):
        phi = evaluate(seg.basis, times[sel])
        c[sel], res[sel], spread[sel] = _eigencondition(jumps[sel], phi)
    if scalar:
        return EigenconditionResult(c[0], float(res[0]), float(spread[0]))
    return EigenconditionResult(c, res, spread)


def _dissipative_shift(jumps: np.ndarray, rates: np.ndarray, c: np.ndarray) -> np.ndarray:
    """(i/2) sum_a gamma_a (c_a^* F_a - c_a F_a^+), batched."""
    w = rates[None, :, None, None]
    term = np.conj(c)[..., None, None] * jumps - c[..., None, None] * dagger(jumps)
    return 0.5j * np.sum(w * term, axis=1)


def effective_hamiltonian(model: LindbladModel, sub: SubspaceTrajectory, t, c=None) -> np.ndarray:
    """``H_eff = G + H + (i/2) sum_a gamma_a (c_a^* F_a - c_a F_a^+)``.

    ``c`` defaults to the first-basis-vector estimate of
    :func:`check_eigencondition`.
    """
    times, scalar = _scalar_or_array(t)
    if c is None:
        c = check_eigencondition(model, sub, times).eigenvalues
    c = np.broadcast_to(np.asarray(c, dtype=complex), (times.size, len(model.channels)))
    h = evaluate(model.hamiltonian, times)
    out = gauge_operator(sub, times) + h + _dissipative_shift(model.jumps(times), model.rates, c)
    return out[0] if scalar else out


def _invariance(h_eff: np.ndarray, seg: FrameSegment, times: np.ndarray) -> np.ndarray:
    phi = evaluate(seg.basis, times)
    comp = evaluate(seg.complement, times)
    return np.max(np.abs(dagger(comp) @ h_eff @ phi), axis=(-2, -1))


def check_invariance(model: LindbladModel, sub: SubspaceTrajectory, t, tol: float = DEFAULT_TOL):
    """``max_{n,j} |<Phi_n^perp(t)| H_eff(t) |Phi_j(t)>|``."""
    times, scalar = _scalar_or_array(t)
    h_eff = effective_hamiltonian(model, sub, times)
    out = np.empty(times.size)
    for seg, sel in _by_segment(sub, times):
        out[sel] = _invariance(h_eff[sel], seg, times[sel])
    return float(out[0]) if scalar else out


def synthesize_control(
    channels: Sequence[JumpChannel],
    sub: SubspaceTrajectory,
    t,
    intra_block=None,
    tol: float = DEFAULT_TOL,
) -> np.ndarray:
    """Hermitian control Hamiltonian that makes the subspace invariant under H_eff.

    Its subspace/complement block is
    ``<Phi_k|H|Phi_n^perp> = -i<dPhi_k/dt|Phi_n^perp> - (i/2) sum_a gamma_a c_a^* <Phi_k|F_a|Phi_n^perp>``;
    both diagonal blocks vanish except for the optional ``intra_block`` (an
    ``M x M`` Hermitian matrix in the subspace basis, or a callable of time).
    Raises :class:`EigenconditionViolated` where the basis is not a common
    eigenbasis of the jump operators within ``tol``.
    """
    times, scalar = _scalar_or_array(t)
    channels = tuple(channels)
    rates = np.array([ch.rate for ch in channels], dtype=float)
    if channels:
        jumps = np.stack([evaluate(ch.operator, times) for ch in channels], axis=1)
    else:
        jumps = np.zeros((times.size, 0, sub.dim, sub.dim), dtype=complex)
    out = np.empty((times.size, sub.dim, sub.dim), dtype=complex)
    for seg, sel in _by_segment(sub, times):
        ts = times[sel]
        e, edot = _frame_and_derivative(sub, seg, ts)
        phi, comp = _split_frame(seg, e)
        phidot, _ = _split_frame(seg, edot)
        c, res, _ = _eigencondition(jumps[sel], phi)
        if np.any(res > tol):
            k = int(np.argmax(res))
            raise EigenconditionViolated(f"eigencondition residual {res[k]:.3g} > {tol:g} at t={ts[k]:.6g}")
        x = -1j * dagger(phidot) @ comp
        if channels:
            fc = np.einsum("tnj,tknl,tlm->tkjm", phi.conj(), jumps[sel], comp)
            x = x - 0.5j * np.einsum("k,tk,tkjm->tjm", rates, np.conj(c), fc)
        block = phi @ x @ dagger(comp)
        h = block + dagger(block)
        if intra_block is not None:
            b = evaluate(intra_block, ts) if callable(intra_block) else np.asarray(intra_block, dtype=complex)
            h = h + phi @ b @ dagger(phi)
        out[sel] = h
    return out[0] if scalar else out


def synthesized_hamiltonian(channels, sub: SubspaceTrajectory, extra: Callable | None = None, tol: float = DEFAULT_TOL):
    """Vectorized callable ``t -> synthesize_control(...) + extra(t)``."""

    @vectorized
    def hamiltonian(t):
        times, scalar = _scalar_or_array(t)
        h = synthesize_control(channels, sub, times, tol=tol)
        if extra is not None:
            h = h + evaluate(extra, times)
        return h[0] if scalar else h

    return hamiltonian


# ---------------------------------------------------------------------------
# verification and the unitary frame propagator


@dataclass
class DfsReport:
    """Per-time subspace diagnostics on a grid plus verdicts at ``tol``."""

    times: list[float]
    eigenvalues: list[list[complex]]
    eigen_residual: list[float]
    eigen_spread: list[float]
    invariance_residual: list[float]
    gauge_hermiticity: list[float]
    tol: float
    eigencondition_ok: bool
    invariance_ok: bool
    verdict: bool
    segments: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eigenvalues"] = [[[z.real, z.imag] for z in row] for row in self.eigenvalues]
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def summary(self) -> dict:
        return {
            "tol": self.tol,
            "verdict": self.verdict,
            "eigencondition_ok": self.eigencondition_ok,
            "invariance_ok": self.invariance_ok,
            "max_eigen_residual": max(self.eigen_residual, default=0.0),
            "max_eigen_spread": max(self.eigen_spread, default=0.0),
            "max_invariance_residual": max(self.invariance_residual, default=0.0),
            "max_gauge_hermiticity": max(self.gauge_hermiticity, default=0.0),
            "segments": self.segments,
        }


def verify_tdfs(model: LindbladModel, sub: SubspaceTrajectory, t_grid, tol: float = DEFAULT_TOL) -> DfsReport:
    """Evaluate both t-DFS conditions on ``t_grid`` and aggregate into a report."""
    times = np.asarray(t_grid, dtype=float).reshape(-1)
    eig = check_eigencondition(model, sub, times)
    g = gauge_operator(sub, times)
    h_eff = g + evaluate(model.hamiltonian, times) + _dissipative_shift(model.jumps(times), model.rates, eig.eigenvalues)
    inv = np.empty(times.size)
    segments = []
    for seg, sel in _by_segment(sub, times):
        inv[sel] = _invariance(h_eff[sel], seg, times[sel])
        e_ok = bool(np.all(eig.residual[sel] <= tol) and np.all(eig.spread[sel] <= tol))
        i_ok = bool(np.all(inv[sel] <= tol))
        segments.append(
            {
                "start": seg.start,
                "end": seg.end if math.isfinite(seg.end) else None,
                "dimension": seg.dimension,
                "samples": int(sel.size),
                "eigencondition_ok": e_ok,
                "invariance_ok": i_ok,
                "verdict": e_ok and i_ok,
            }
        )
    herm = np.max(np.abs(g - dagger(g)), axis=(-2, -1))
    e_ok = bool(np.all(eig.residual <= tol) and np.all(eig.spread <= tol))
    i_ok = bool(np.all(inv <= tol))
    return DfsReport(
        times=times.tolist(),
        eigenvalues=[[complex(z) for z in row] for row in eig.eigenvalues],
        eigen_residual=eig.residual.tolist(),
        eigen_spread=eig.spread.tolist(),
        invariance_residual=inv.tolist(),
        gauge_hermiticity=herm.tolist(),
        tol=tol,
        eigencondition_ok=e_ok,
        invariance_ok=i_ok,
        verdict=e_ok and i_ok,
        segments=segments,
    )


@numba.njit(cache=True)
def _conjugate_chain(rho, w, first, every, out):
    """rho_{k+1} = W_k rho_k W_k^+, recording states whose global step index is a multiple of ``every``."""
    nrec = 0
    for k in range(w.shape[0]):
        wd = np.ascontiguousarray(np.conj(w[k]).T)
        rho = w[k] @ rho @ wd
        if (first + k + 1) % every == 0:
            out[nrec] = rho
            nrec += 1
    return rho, nrec


def frame_propagate(
    model: LindbladModel,
    sub: SubspaceTrajectory,
    rho0,
    t0: float,
    t1: float,
    cfg: IntegratorConfig,
    tol: float = DEFAULT_TOL,
) -> Trajectory:
    """Propagate a subspace-supported state with the rotating-frame unitary.

    In the frame of :func:`frame_unitary` the state obeys
    ``d rho_bar/dt = -i[H_eff_bar, rho_bar]``; each step applies
    ``exp(-i H_eff_bar(t_mid) dt)`` and states are mapped back to the lab frame.
    Across a segment boundary the lab-frame state is handed over unchanged.
    Raises :class:`ConditionsViolated` if either condition fails at any
    midpoint, or if ``rho0`` has weight outside the subspace.
    """
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    rho = np.array(validate_density_matrix(rho0), dtype=complex)
    seg0 = sub.segment(t0)
    comp = evaluate(seg0.complement, [t0])[0]
    leak = np.max(np.abs(dagger(comp) @ rho), initial=0.0)
    if leak > 1e-8:
        raise ConditionsViolated(f"initial state has weight {leak:.3g} outside the subspace")

    cuts = sorted(set(model.breakpoints) | set(sub.breakpoints))
    times_out = [t0]
    states_out = [rho.copy()]
    steps_done = 0
    for a, b, nsteps, h in step_grid(t0, t1, cfg.dt, cuts):
        seg = sub.segment(0.5 * (a + b))
        ea = _frame(seg, np.array([seg.start]))[0]
        nodes = a + h * np.arange(nsteps + 1)
        nodes[-1] = b
        # hand the lab-frame state into this segment's rotating frame
        u_a = ea @ dagger(_frame(seg, np.array([a]))[0])
        rho_bar = u_a @ rho @ dagger(u_a)
        mids = a + h * (np.arange(nsteps) + 0.5)
        for s0 in range(0, nsteps, 8192):
            tm = mids[s0 : s0 + 8192]
            jumps = model.jumps(tm)
            e, edot = _frame_and_derivative(sub, seg, tm)
            phi, compm = _split_frame(seg, e)
            c, res, spread = _eigencondition(jumps, phi)
            g = 1j * e @ dagger(edot)
            h_eff = g + evaluate(model.hamiltonian, tm) + _dissipative_shift(jumps, model.rates, c)
            inv = np.max(np.abs(dagger(compm) @ h_eff @ phi), axis=(-2, -1))
            worst = np.maximum(np.maximum(res, spread), inv)
            if np.any(worst > tol):
                k = int(np.argmax(worst))
                raise ConditionsViolated(f"t-DFS conditions fail at t={tm[k]:.6g} (residual {worst[k]:.3g})")
            u = ea @ dagger(e)
            w = matrix_exponential(-1j * h * (u @ h_eff @ dagger(u)))
            every = cfg.record_every
            first = steps_done + s0
            rec = np.empty((tm.size, sub.dim, sub.dim), dtype=complex)
            rho_bar, nrec = _conjugate_chain(rho_bar, np.ascontiguousarray(w), first, every, rec)
            ks = np.array([k for k in range(1, tm.size + 1) if (first + k) % every == 0], dtype=int)
            if nrec:
                rec_nodes = nodes[s0 + ks]
                u_nodes = ea @ dagger(_frame(seg, rec_nodes))
                lab = dagger(u_nodes) @ rec[:nrec] @ u_nodes
                times_out.extend(rec_nodes.tolist())
                states_out.extend(lab)
        steps_done += nsteps
        u_b = ea @ dagger(_frame(seg, np.array([b]))[0])
        rho = dagger(u_b) @ rho_bar @ u_b
    if times_out[-1] != t1:
        times_out.append(t1)
        states_out.append(rho)
    return Trajectory(np.array(times_out), np.array(states_out))
