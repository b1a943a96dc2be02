"""Dense linear algebra substrate.

Matrices are plain ``numpy`` float arrays. The helpers here validate shapes and
finiteness, and supply the few primitives the rest of the package relies on:
row softmax, a one-sided Jacobi SVD and a seeded counter-based RNG.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConvergenceError(NumericError):
    """An iterative method hit its iteration cap."""


def check_matrix(m, name="matrix", ndim=2, allow_batch=False) -> np.ndarray:
    """Return ``m`` as a finite floating array.

    Floating dtypes are preserved (extended precision is used by the
    finite-difference checker); everything else becomes float64.
    """
    arr = np.asarray(m)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if allow_batch:
        if arr.ndim < ndim:
            raise DimensionError(f"{name} must have at least {ndim} dims, got shape {arr.shape}")
    elif arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains NaN or Inf")
    return arr


def matmul(a, b) -> np.ndarray:
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax(m) -> np.ndarray:
    """Softmax along the last axis with max subtraction.

    Entries equal to ``-inf`` are treated as excluded slots and get weight 0.
    Each row must contain at least one finite entry.
    """
    m = np.asarray(m)
    if not np.issubdtype(m.dtype, np.floating):
        m = m.astype(np.float64)
    if np.any(np.isnan(m)) or np.any(m == np.inf):
        raise NumericError("row_softmax input contains NaN or +Inf")
    shift = m.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(shift)):
        raise NumericError("row_softmax: a row has no finite entry")
    e = np.exp(m - shift)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of a round-robin tournament: every column pair meets once per
    sweep, and the pairs inside one round are disjoint so they rotate together."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        left = players[: m // 2]
        right = players[m // 2 :][::-1]
        pairs = [(p, q) for p, q in zip(left, right) if p < n and q < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd(m, tol: float = 1e-12, max_sweeps: int = 60, compute_vectors: bool = True) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Columns of a working copy are orthogonalized pairwise until every pair
    satisfies ``|a_p . a_q| <= tol * |a_p| |a_q|``. Singular values are the
    final column norms. Wide matrices are handled through the transpose.

    With ``compute_vectors=False`` only the spectrum is returned (the vector
    fields are empty). That path first reduces the matrix to the triangular
    factor of a QR decomposition taken with columns in order of decreasing
    norm, which has the same singular values and needs fewer sweeps.
    """
    a = check_matrix(m, "m").astype(np.float64)
    rows, cols = a.shape
    if rows < cols:
        r = svd(a.T, tol=tol, max_sweeps=max_sweeps, compute_vectors=compute_vectors)
        return SvdResult(r.singular_values, r.right_vectors, r.left_vectors)
    if cols == 0:
        return SvdResult(np.zeros(0), np.zeros((rows, 0)), np.zeros((0, 0)))

    if not compute_vectors and cols > 1:
        order = np.argsort(-np.einsum("ij,ij->j", a, a), kind="stable")
        a = np.linalg.qr(a[:, order], mode="r").T

    # Columns are stored as rows so the pairwise gathers stay contiguous.
    ut = a.T.copy()
    vt = np.eye(cols) if compute_vectors else None
    rounds = _round_robin(cols)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = ut[p], ut[q]
            alpha = np.einsum("ij,ij->i", up, up)
            beta = np.einsum("ij,ij->i", uq, uq)
            gamma = np.einsum("ij,ij->i", up, uq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > 0) & (beta > 0)
            if not active.any():
                continue
            rotated = True
            if not active.all():
                p, q = p[active], q[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
                up, uq = up[active], uq[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            ut[p], ut[q] = c * up - s * uq, s * up + c * uq
            if vt is not None:
                vp, vq = vt[p], vt[q]
                vt[p], vt[q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->i", ut, ut))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    if vt is None:
        return SvdResult(sigma, np.zeros((rows, 0)), np.zeros((cols, 0)))
    u = ut[order].T
    v = vt[order].T
    nz = sigma > 0
    u[:, nz] /= sigma[nz]
    u[:, ~nz] = 0.0
    return SvdResult(sigma, u, v)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def rand_matrix(rng: np.random.Generator, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
    """I.i.d. uniform entries in ``(-scale, scale)``."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return rng.uniform(-scale, scale, size=(rows, cols))
