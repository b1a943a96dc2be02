"""Dense reference implementations.

Everything here builds full ``N x N`` matrices on purpose; these functions
exist to check the linear-cost paths and to study rank structure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import DEN_FLOOR, _check_qkv, floor_denominator
from .feature_maps import FeatureMapSet, apply
from .numerics import check_matrix, row_softmax, svd


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def dense_attention_matrix(q, k_mat, causal: bool = False) -> np.ndarray:
    q, k_mat = _check_qkv(q, k_mat)
    n, d = q.shape[-2:]
    logits = q @ np.swapaxes(k_mat, -1, -2) / math.sqrt(d)
    if causal:
        logits = np.where(causal_mask(n), logits, -np.inf)
    return row_softmax(logits)


def dense_softmax_attention(q, k_mat, v, causal: bool = False, return_matrix: bool = False):
    """Standard softmax attention ``softmax(QK^T / sqrt(D)) V``.

    With ``return_matrix=True`` the pair ``(output, A)`` is returned.
    """
    q, k_mat, v = _check_qkv(q, k_mat, v)
    a = dense_attention_matrix(q, k_mat, causal)
    out = a @ v
    return (out, a) if return_matrix else out


def dense_banded_oracle(q, k_mat, bandwidth: int, causal: bool = False) -> np.ndarray:
    """Dense near-field matrix: logits outside the band (and above the
    diagonal when causal) are set to ``-inf`` before the row softmax."""
    q, k_mat = _check_qkv(q, k_mat)
    n, d = q.shape[-2:]
    i, j = np.indices((n, n))
    keep = np.abs(i - j) <= bandwidth
    if causal:
        keep &= j <= i
    logits = q @ np.swapaxes(k_mat, -1, -2) / math.sqrt(d)
    return row_softmax(np.where(keep, logits, -np.inf))


def kernel_matrix(q, k_mat, kind) -> np.ndarray:
    """Unnormalized ``phi(Q) phi(K)^T`` for one feature map."""
    return apply(kind, q) @ np.swapaxes(apply(kind, k_mat), -1, -2)


def dense_lowrank_oracle(q, k_mat, maps, causal: bool = False) -> np.ndarray:
    """Dense far-field matrix ``L``: per map, row-normalize the kernel matrix
    (over ``j <= i`` when causal, with the same signed denominator floor as
    the fast path) and sum over maps."""
    q, k_mat = _check_qkv(q, k_mat)
    n = q.shape[-2]
    total = np.zeros(q.shape[:-1] + (n,), dtype=np.result_type(q, k_mat))
    for kind in FeatureMapSet(maps):
        kern = kernel_matrix(q, k_mat, kind)
        if causal:
            kern = np.where(causal_mask(n), kern, 0.0)
        den, _ = floor_denominator(kern.sum(axis=-1))
        total += kern / den[..., None]
    return total


def dense_fmm_matrix(q, k_mat, cfg) -> np.ndarray:
    """``w1 * D + w2 * L`` built densely for an ``AttentionConfig``."""
    n = np.shape(q)[-2]
    out = np.zeros(np.shape(q)[:-1] + (n,))
    if cfg.has_near:
        out = out + cfg.blend.w1 * dense_banded_oracle(q, k_mat, cfg.bandwidth, cfg.causal)
    if cfg.has_far:
        out = out + cfg.blend.w2 * dense_lowrank_oracle(q, k_mat, cfg.feature_maps, cfg.causal)
    return out


# -------------------------------------------------------- separable kernels


def inverse_square(s):
    return 1.0 / np.square(s)


def inverse_square_taylor(m: int) -> float:
    """``g^(m)(1) / m!`` for ``g(s) = 1/s^2``, i.e. ``(-1)^m (m + 1)``."""
    return float((-1) ** m * (m + 1))


class GeometryError(ValueError):
    """A target coincides with the expansion centre."""


@dataclass(frozen=True)
class SeparatedKernelProblem:
    """Scalar targets and sources around a centre, with sources inside a ball
    of radius ``delta * |q_i - centre|`` for every target."""

    targets: np.ndarray
    sources: np.ndarray
    center: float = 0.0
    delta: float = 0.5

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=float).ravel())
        object.__setattr__(self, "sources", np.asarray(self.sources, dtype=float).ravel())

    def is_well_separated(self) -> bool:
        near = np.abs(self.sources - self.center).max(initial=0.0)
        far = np.abs(self.targets - self.center).min(initial=np.inf)
        return bool(near <= self.delta * far)

    def kernel(self) -> np.ndarray:
        """Exact interaction matrix ``g(|q_i - k_j|)``."""
        return inverse_square(np.abs(self.targets[:, None] - self.sources[None, :]))

    @classmethod
    def sample(cls, rng, n_targets: int, n_sources: int, delta: float, radius: float = 1.0, center: float = 0.0):
        """Sources uniform in ``[-delta R, delta R]``, targets with
        ``R <= |q - centre| <= 2R`` on either side."""
        if not 0 < delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        sources = center + rng.uniform(-delta * radius, delta * radius, n_sources)
        sign = np.where(rng.uniform(size=n_targets) < 0.5, -1.0, 1.0)
        targets = center + sign * rng.uniform(radius, 2 * radius, n_targets)
        return cls(targets, sources, center, delta)


    @classmethod
    def grid(cls, n_targets: int, n_sources: int, delta: float, radius: float = 1.0, center: float = 0.0):
        """Deterministic layout: sources evenly spaced over ``[-delta R, delta R]``
        (endpoints included), targets evenly spaced over ``[R, 2R]`` and
        alternating sides of the centre."""
        if not 0 < delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        sources = center + np.linspace(-delta * radius, delta * radius, n_sources)
        dist = np.linspace(radius, 2 * radius, n_targets)
        sign = np.where(np.arange(n_targets) % 2 == 0, 1.0, -1.0)
        return cls(center + sign * dist, sources, center, delta)


@dataclass(frozen=True)
class LowRankFactors:
    u: np.ndarray
    v: np.ndarray

    @property
    def p(self) -> int:
        return self.u.shape[1]

    def product(self) -> np.ndarray:
        return self.u @ self.v.T


def lemma1_factorize(prob: SeparatedKernelProblem, p: int) -> LowRankFactors:
    """Rank-``p`` Taylor factorization of the inverse-square kernel.

    With ``t = (k_j - c) / (q_i - c)`` the kernel is
    ``g(|q_i - c|) g(1 - t) = g(|q_i - c|) sum_m g^(m)(1)/m! (-t)^m``, so

    ``U[i, m] = g(|q_i - c|) / (c - q_i)^m`` and
    ``V[j, m] = g^(m)(1)/m! * (k_j - c)^m`` for ``m = 0 .. p-1``.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    dq = prob.targets - prob.center
    if np.any(dq == 0):
        raise GeometryError("a target coincides with the expansion centre")
    dk = prob.sources - prob.center
    m = np.arange(p)
    u = inverse_square(np.abs(dq))[:, None] / np.power(-dq[:, None], m[None, :])
    coeffs = np.array([inverse_square_taylor(i) for i in m])
    v = coeffs[None, :] * np.power(dk[:, None], m[None, :])
    return LowRankFactors(u, v)


def lemma1_errors(prob: SeparatedKernelProblem, ps) -> np.ndarray:
    """Max-abs factorization error for each rank in ``ps``."""
    exact = prob.kernel()
    return np.array([np.abs(exact - lemma1_factorize(prob, p).product()).max() for p in ps])


# --------------------------------------------------------------------- rank


def epsilon_rank(m, eps: float = 1e-6, relative: bool = True) -> int:
    """Count singular values above ``eps * sigma_1`` (relative) or above
    ``eps`` (absolute). The zero matrix has rank 0."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    sigma = svd(check_matrix(m), compute_vectors=False).singular_values
    return rank_from_spectrum(sigma, eps, relative)


def rank_from_spectrum(sigma, eps: float, relative: bool) -> int:
    sigma = np.asarray(sigma)
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    threshold = eps * sigma[0] if relative else eps
    return int(np.count_nonzero(sigma > threshold))


__all__ = [
    "DEN_FLOOR",
    "dense_softmax_attention",
    "dense_banded_oracle",
    "dense_lowrank_oracle",
    "dense_fmm_matrix",
    "SeparatedKernelProblem",
    "LowRankFactors",
    "lemma1_factorize",
    "epsilon_rank",
]
