"""Dense complex linear algebra for small Hilbert spaces.

Kets are 1-D complex arrays; sets of kets are stored as the columns of an
``(N, M)`` array. Most helpers accept leading batch axes so that a whole time
grid can be processed in one call.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DegenerateSet, DimensionMismatch, NonSquare

__all__ = [
    "dagger",
    "as_columns",
    "gram_schmidt",
    "matrix_exponential",
    "null_space",
    "fix_phase",
    "projector_basis",
    "joint_eigenspaces",
    "orthonormality_error",
]

# exp(A) Taylor core is applied after scaling to ||A|| <= _EXPM_THETA.
_EXPM_THETA = 0.5
_EXPM_ORDER = 18


def dagger(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def as_columns(vectors) -> np.ndarray:
    """Stack a sequence of kets (or pass through a 2-D array) as columns."""
    if isinstance(vectors, np.ndarray) and vectors.ndim == 2:
        return vectors.astype(complex)
    cols = [np.asarray(v, dtype=complex).reshape(-1) for v in vectors]
    if not cols:
        raise DegenerateSet("empty vector set")
    dims = {c.shape[0] for c in cols}
    if len(dims) != 1:
        raise DimensionMismatch(f"kets of different dimensions: {sorted(dims)}")
    return np.stack(cols, axis=1)


def gram_schmidt(vectors, tol: float = 1e-10) -> np.ndarray:
    """Orthonormalize kets with modified Gram-Schmidt plus one re-orthogonalization pass.

    Returns an ``(N, k)`` array whose columns are orthonormal and span the same
    space as the input. A vector whose residual norm falls below
    ``tol * max_input_norm`` makes the set degenerate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = as_columns(vectors)
    scale = max(np.max(np.linalg.norm(a, axis=0)), np.finfo(float).tiny)
    q = np.zeros_like(a)
    for k in range(a.shape[1]):
        v = a[:, k].copy()
        for _ in range(2):
            for j in range(k):
                v -= np.vdot(q[:, j], v) * q[:, j]
        nrm = np.linalg.norm(v)
        if nrm <= tol * scale:
            raise DegenerateSet(f"vector {k} lies in the span of the previous ones")
        q[:, k] = v / nrm
    return q


def orthonormality_error(q: np.ndarray) -> np.ndarray:
    """Max-abs deviation of ``q^dagger q`` from the identity (batched)."""
    m = q.shape[-1]
    return np.max(np.abs(dagger(q) @ q - np.eye(m)), axis=(-2, -1))


def _check_square(a: np.ndarray) -> None:
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise NonSquare(f"expected square matrices, got shape {a.shape}")


def matrix_exponential(a) -> np.ndarray:
    """exp(A) by scaling and squaring around a truncated Taylor series.

    Accepts a single square matrix or a stack ``(..., n, n)``; the whole stack
    shares one scaling exponent.
    """
    a = np.asarray(a, dtype=complex)
    _check_square(a)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    n = a.shape[-1]
    norm = float(np.max(np.sum(np.abs(a), axis=-2))) if a.size else 0.0
    squarings = max(0, math.ceil(math.log2(norm / _EXPM_THETA))) if norm > _EXPM_THETA else 0
    x = a / (2.0**squarings)
    eye = np.broadcast_to(np.eye(n, dtype=complex), a.shape)
    # Horner form of sum_k x^k / k!
    result = eye + x / _EXPM_ORDER
    for k in range(_EXPM_ORDER - 1, 0, -1):
        result = eye + (x @ result) / k
    for _ in range(squarings):
        result = result @ result
    return result


def null_space(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Orthonormal basis (columns) of ker(a) from the SVD; singular values <= tol count as zero."""
    a = np.asarray(a, dtype=complex)
    n = a.shape[-1]
    if a.shape[0] == 0:
        return np.eye(n, dtype=complex)
    _, s, vh = np.linalg.svd(a)
    rank = int(np.sum(s > tol))
    return np.conj(vh[rank:].T)


def fix_phase(v: np.ndarray) -> np.ndarray:
    """Rotate each column so its largest-magnitude component is real positive.

    Ties are broken towards the lowest index (within 1e-12 relative).
    """
    v = np.array(v, dtype=complex)
    single = v.ndim == 1
    cols = v.reshape(v.shape[0], -1)
    for k in range(cols.shape[1]):
        mag = np.abs(cols[:, k])
        idx = int(np.argmax(mag >= mag.max() * (1 - 1e-12)))
        if mag[idx] > 0:
            cols[:, k] *= np.conj(cols[idx, k]) / mag[idx]
    return cols[:, 0] if single else cols


def choose_pivots(p: np.ndarray, rank: int) -> list[int]:
    """Greedy column pivots for the range of a projector ``p`` (single matrix).

    Picks, one at a time, the canonical vector with the largest remaining
    projected norm; ties go to the lowest index.
    """
    cols = np.array(p, dtype=complex)
    pivots: list[int] = []
    for _ in range(rank):
        norms = np.linalg.norm(cols, axis=0)
        norms[pivots] = -1.0
        best = norms.max()
        idx = int(np.argmax(norms >= best * (1 - 1e-9)))
        pivots.append(idx)
        q = cols[:, idx] / np.linalg.norm(cols[:, idx])
        cols = cols - np.outer(q, np.conj(q) @ cols)
    return pivots


def projector_basis(p: np.ndarray, pivots: Sequence[int]) -> np.ndarray:
    """Orthonormal basis of range(p) from the pivot columns of the projector (batched).

    Column k is the Gram-Schmidt orthonormalization of ``p[:, pivots[k]]``
    against the earlier columns, so its component at ``pivots[k]`` is real and
    positive. Smooth in ``p`` as long as the pivot columns stay independent.
    """
    a = np.asarray(p)[..., :, list(pivots)]
    q, r = np.linalg.qr(a)
    # QR leaves an arbitrary sign/phase on each column; normalize diag(r) > 0.
    d = np.diagonal(r, axis1=-2, axis2=-1)
    ph = np.where(np.abs(d) > 0, d / np.where(np.abs(d) > 0, np.abs(d), 1.0), 1.0)
    return q * ph[..., None, :]


def _refine_eigenvalue(f: np.ndarray, c: complex, iters: int = 4) -> complex:
    eye = np.eye(f.shape[0])
    for _ in range(iters):
        _, _, vh = np.linalg.svd(f - c * eye)
        v = np.conj(vh[-1])
        c = complex(np.vdot(v, f @ v))
    return c


def _candidate_eigenvalues(f: np.ndarray, tol: float) -> list[complex]:
    raw = [_refine_eigenvalue(f, complex(c)) for c in np.linalg.eigvals(f)]
    raw.sort(key=lambda c: (round(c.real / tol) * tol, round(c.imag / tol) * tol))
    out: list[complex] = []
    for c in raw:
        if all(abs(c - d) > tol for d in out):
            out.append(c)
    return out


def joint_eigenspaces(ops, tol: float = 1e-9) -> list[tuple[tuple[complex, ...], np.ndarray]]:
    """Common eigenspaces of a list of square operators.

    The first operator is eigendecomposed; each of its eigenspaces is then
    successively restricted to the eigenspaces of the remaining operators.
    Returns ``[(eigentuple, basis), ...]`` where ``basis`` holds orthonormal
    columns with ``||F v - c v|| <= tol`` for every operator/eigenvalue pair.
    Vectors sharing an eigentuple are grouped in one basis. For normal
    operators distinct groups are mutually orthogonal; for non-normal
    operators they need not be.
    """
    mats = [np.asarray(f, dtype=complex) for f in ops]
    if not mats:
        raise ValueError("need at least one operator")
    for f in mats:
        _check_square(f)
    n = mats[0].shape[0]
    if any(f.shape != (n, n) for f in mats):
        raise DimensionMismatch("operators must share one dimension")
    candidates = [_candidate_eigenvalues(f, tol) for f in mats]
    eye = np.eye(n)

    spaces: list[tuple[tuple[complex, ...], np.ndarray]] = [((), np.eye(n, dtype=complex))]
    for f, cands in zip(mats, candidates):
        nxt = []
        for tup, v in spaces:
            for c in cands:
                w = null_space((f - c * eye) @ v, tol)
                if w.shape[1]:
                    nxt.append((tup + (c,), v @ w))
        spaces = nxt

    result = []
    for tup, v in spaces:
        p = v @ dagger(v)
        basis = projector_basis(p, choose_pivots(p, v.shape[1]))
        clean = tuple(complex(np.round(c.real, 15), np.round(c.imag, 15)) for c in tup)
        result.append((clean, basis))
    return result
