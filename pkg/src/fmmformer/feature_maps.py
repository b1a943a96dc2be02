"""Elementwise kernel feature maps for far-field attention."""
from __future__ import annotations

import enum
from typing import Iterable

import numpy as np

from .numerics import check_matrix, svd


class FeatureMapKind(str, enum.Enum):
    ELU_PLUS_ONE = "elu1"
    NEG_ELU_PLUS_ONE = "neg_elu1"
    TANH = "tanh"

    @property
    def positive(self) -> bool:
        return self is not FeatureMapKind.TANH


def _elu_plus_one(x):
    # exp(min(x, 0)) + max(x, 0) is exp(x) below zero and 1 + x above
    out = np.exp(np.minimum(x, 0))
    out += np.maximum(x, 0)
    return out


def _elu_plus_one_grad(x):
    return np.where(x > 0, 1, np.exp(np.minimum(x, 0))).astype(x.dtype)


def apply(kind, m) -> np.ndarray:
    """Evaluate a feature map elementwise."""
    kind = FeatureMapKind(kind)
    x = np.asarray(m)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if kind is FeatureMapKind.ELU_PLUS_ONE:
        return _elu_plus_one(x)
    if kind is FeatureMapKind.NEG_ELU_PLUS_ONE:
        return _elu_plus_one(-x)
    return np.tanh(x)


def apply_derivative(kind, m) -> np.ndarray:
    kind = FeatureMapKind(kind)
    x = np.asarray(m)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if kind is FeatureMapKind.ELU_PLUS_ONE:
        return _elu_plus_one_grad(x)
    if kind is FeatureMapKind.NEG_ELU_PLUS_ONE:
        return -_elu_plus_one_grad(-x)
    t = np.tanh(x)
    return 1 - t * t


def derivative_from_value(kind, m, value) -> np.ndarray:
    """Derivative at ``m`` given ``value = apply(kind, m)``, without another
    transcendental evaluation."""
    kind = FeatureMapKind(kind)
    # elu + 1 exceeds one exactly where its slope is one
    if kind is FeatureMapKind.ELU_PLUS_ONE:
        return np.minimum(value, 1)
    if kind is FeatureMapKind.NEG_ELU_PLUS_ONE:
        return -np.minimum(value, 1)
    return 1 - value * value


class FeatureMapSet(tuple):
    """Ordered, duplicate-free collection of at most three feature maps.

    May be empty, which an attention config reads as "no far field".
    """

    def __new__(cls, kinds: Iterable = ()):
        if isinstance(kinds, str):
            kinds = parse_map_list(kinds)
        kinds = tuple(FeatureMapKind(k) for k in kinds)
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate feature maps in {[k.value for k in kinds]}")
        if len(kinds) > len(FeatureMapKind):
            raise ValueError("at most three feature maps are supported")
        return super().__new__(cls, kinds)

    @property
    def rank(self) -> int:
        return len(self)

    @property
    def all_positive(self) -> bool:
        return all(k.positive for k in self)

    def tokens(self) -> str:
        return ",".join(k.value for k in self)

    def __repr__(self):
        return f"FeatureMapSet({self.tokens()!r})"


def parse_map_list(text: str) -> list[FeatureMapKind]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if items in (["none"], []):
        return []
    try:
        return [FeatureMapKind(t) for t in items]
    except ValueError:
        valid = ", ".join(k.value for k in FeatureMapKind)
        raise ValueError(f"unknown feature map in {text!r}; expected a comma list of {valid}") from None


def independence_probe(maps, rng: np.random.Generator, n_points: int = 64, scale: float = 3.0) -> bool:
    """Check that the maps are linearly independent as functions.

    Evaluates every map at ``n_points`` random scalars drawn uniformly from
    ``(-scale, scale)`` and tests whether the resulting ``n_points x r``
    matrix has numerical rank ``r`` (``sigma_r > 1e-9 * sigma_1``).
    """
    maps = FeatureMapSet(maps)
    if len(maps) == 0:
        raise ValueError("independence_probe needs at least one map")
    if n_points < len(maps):
        raise ValueError("n_points must be at least the number of maps")
    x = rng.uniform(-scale, scale, size=n_points)
    evals = check_matrix(np.stack([apply(k, x) for k in maps], axis=1), "evaluations")
    sigma = svd(evals, compute_vectors=False).singular_values
    return bool(sigma[-1] > 1e-9 * sigma[0])
