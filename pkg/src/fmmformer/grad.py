"""Reverse-mode derivatives for the attention paths, plus a finite-difference
checker.

Each ``*_forward`` returns ``(output, saved)``; the matching ``backward_*``
takes the saved state and the upstream gradient and returns a ``GradBundle``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import attention as att
from .feature_maps import FeatureMapSet, derivative_from_value
from .numerics import DimensionError, row_softmax


@dataclass
class GradBundle:
    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray
    d_blend: tuple[float, float] = (0.0, 0.0)

    def __add__(self, other: "GradBundle") -> "GradBundle":
        return GradBundle(
            self.d_q + other.d_q,
            self.d_k + other.d_k,
            self.d_v + other.d_v,
            (self.d_blend[0] + other.d_blend[0], self.d_blend[1] + other.d_blend[1]),
        )

    def scaled(self, w) -> "GradBundle":
        return GradBundle(self.d_q * w, self.d_k * w, self.d_v * w, self.d_blend)

    @classmethod
    def zeros_like(cls, q, k, v) -> "GradBundle":
        return cls(np.zeros_like(q), np.zeros_like(k), np.zeros_like(v))


def _check_upstream(upstream, shape):
    upstream = np.asarray(upstream)
    if upstream.shape != tuple(shape):
        raise DimensionError(f"upstream gradient has shape {upstream.shape}, expected {tuple(shape)}")
    return upstream


# ---------------------------------------------------------------- near field


@dataclass
class NearFieldSaved:
    layout: att.BandLayout
    probs: np.ndarray
    qb: np.ndarray
    kc: np.ndarray
    vc: np.ndarray
    shape_q: tuple
    shape_v: tuple


def near_field_forward(q, k, v, bandwidth: int, causal: bool = False):
    q, k, v = att._check_qkv(q, k, v)
    bandwidth = att._check_bandwidth(bandwidth, q.shape[-2])
    layout = att.BandLayout(q.shape[-2], bandwidth, causal)
    probs, qb, kc = att.band_tiles(q, k, layout)
    vc = layout.context(v)
    out = layout.unblock(probs @ vc)
    return out, NearFieldSaved(layout, probs, qb, kc, vc, q.shape, v.shape)


def backward_near_field(saved: NearFieldSaved, upstream) -> GradBundle:
    """Softmax Jacobian restricted to the band, evaluated tile by tile."""
    g = _check_upstream(upstream, saved.shape_v)
    lay, probs = saved.layout, saved.probs
    gb = np.ascontiguousarray(lay.blocks(g))
    dprobs = gb @ np.swapaxes(saved.vc, -1, -2)
    dvc = np.swapaxes(probs, -1, -2) @ gb
    dlogits = probs * (dprobs - (probs * dprobs).sum(axis=-1, keepdims=True))
    dlogits *= 1 / math.sqrt(saved.shape_q[-1])
    dq = lay.unblock(dlogits @ saved.kc)
    dkc = np.swapaxes(dlogits, -1, -2) @ saved.qb
    return GradBundle(dq, lay.scatter_context(dkc), lay.scatter_context(dvc))


# -------------------------------------------------------------- dense softmax


@dataclass
class SoftmaxSaved:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray


def dense_softmax_forward(q, k, v, causal: bool = False):
    q, k, v = att._check_qkv(q, k, v)
    n, d = q.shape[-2:]
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    if causal:
        logits = np.where(np.tril(np.ones((n, n), dtype=bool)), logits, -np.inf)
    a = row_softmax(logits)
    return a @ v, SoftmaxSaved(q, k, v, a)


def backward_dense_softmax(saved: SoftmaxSaved, upstream) -> GradBundle:
    q, k, v, a = saved.q, saved.k, saved.v, saved.a
    g = _check_upstream(upstream, v.shape)
    da = g @ np.swapaxes(v, -1, -2)
    dlogits = a * (da - (a * da).sum(axis=-1, keepdims=True)) / math.sqrt(q.shape[-1])
    return GradBundle(dlogits @ k, np.swapaxes(dlogits, -1, -2) @ q, np.swapaxes(a, -1, -2) @ g)


# ----------------------------------------------------------------- far field


@dataclass
class FarFieldSaved:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    causal: bool
    maps: FeatureMapSet
    fq: np.ndarray
    fk: np.ndarray
    den: np.ndarray
    clamped: np.ndarray
    terms: np.ndarray


def far_field_forward(q, k, v, maps, causal: bool = False):
    q, k, v = att._check_qkv(q, k, v)
    maps = FeatureMapSet(maps)
    if not maps:
        raise att.ConfigError("far field needs at least one feature map")
    terms, fq, fk, den, clamped = att.far_field_stack(q, k, v, maps, causal)
    saved = FarFieldSaved(q, k, v, causal, maps, fq, fk, den, clamped, terms)
    return terms.sum(axis=0), saved


def backward_far_field(saved: FarFieldSaved, upstream) -> GradBundle:
    """Quotient rule through the normalizer, chain rule through the feature
    maps. Rows whose denominator was floored pass no gradient through it."""
    s = saved
    g = _check_upstream(upstream, s.v.shape)
    v1 = att.with_ones(s.v)
    g_num = g / s.den[..., None]
    g_den = np.where(s.clamped, 0.0, -(g * s.terms).sum(axis=-1) / s.den)
    g1 = np.concatenate([g_num, g_den[..., None].astype(g_num.dtype)], axis=-1)
    dfq = att.linear_scan(g1, v1, s.fk, s.causal)
    dfk = att.linear_scan(v1, g1, s.fq, s.causal, reverse=True)
    dv = att.linear_scan(s.fk, s.fq, g_num, s.causal, reverse=True)
    d_q = np.zeros_like(s.q)
    d_k = np.zeros_like(s.k)
    for l, kind in enumerate(s.maps):
        d_q += dfq[l] * derivative_from_value(kind, s.q, s.fq[l])
        d_k += dfk[l] * derivative_from_value(kind, s.k, s.fk[l])
    return GradBundle(d_q, d_k, dv.sum(axis=0))


# ------------------------------------------------------------------- blended


def _dsigmoid(x):
    s = att.sigmoid(x)
    return float(s * (1 - s))


@dataclass
class FmmSaved:
    cfg: att.AttentionConfig
    near: NearFieldSaved | None
    far: FarFieldSaved | None
    near_out: np.ndarray | None
    far_out: np.ndarray | None
    shape: tuple


def fmm_forward(q, k, v, cfg: att.AttentionConfig):
    q, k, v = att._check_qkv(q, k, v)
    out = np.zeros(v.shape, dtype=np.result_type(q, v))
    near = far = near_out = far_out = None
    if cfg.has_near:
        near_out, near = near_field_forward(q, k, v, cfg.bandwidth, cfg.causal)
        out += cfg.blend.w1 * near_out
    if cfg.has_far:
        far_out, far = far_field_forward(q, k, v, cfg.feature_maps, cfg.causal)
        out += cfg.blend.w2 * far_out
    return out, FmmSaved(cfg, near, far, near_out, far_out, v.shape)


def backward_blend(saved: FmmSaved, upstream) -> GradBundle:
    """Gate gradients ``<upstream, component> * sigmoid'(logit)`` plus the
    gate-weighted component gradients."""
    g = _check_upstream(upstream, saved.shape)
    blend = saved.cfg.blend
    grads = None
    d1 = d2 = 0.0
    if saved.near is not None:
        d1 = float(np.sum(g * saved.near_out)) * _dsigmoid(blend.raw_w1)
        grads = backward_near_field(saved.near, g * blend.w1)
    if saved.far is not None:
        d2 = float(np.sum(g * saved.far_out)) * _dsigmoid(blend.raw_w2)
        far = backward_far_field(saved.far, g * blend.w2)
        grads = far if grads is None else grads + far
    grads.d_blend = (d1, d2)
    return grads


# ---------------------------------------------------------------------- tape


class Tape:
    """Records backward closures during a forward pass and replays them in
    reverse order."""

    def __init__(self):
        self.records: list[tuple[str, Callable[[], None]]] = []
        self._replayed = False

    def record(self, name: str, backward: Callable[[], None]) -> None:
        if self._replayed:
            raise RuntimeError("tape already replayed")
        self.records.append((name, backward))

    def backward(self) -> None:
        if self._replayed:
            raise RuntimeError("tape already replayed")
        self._replayed = True
        for _, fn in reversed(self.records):
            fn()

    def __len__(self):
        return len(self.records)


# --------------------------------------------------------- finite differences


def fd_check(f: Callable[[list[np.ndarray]], float], params, analytic, h: float = 1e-6,
             extended: bool = True) -> float:
    """Largest relative disagreement between ``analytic`` gradients and
    central differences ``(f(x+h) - f(x-h)) / 2h`` taken coordinate by
    coordinate.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    With ``extended=True`` the perturbed evaluations run in ``np.longdouble``
    so that cancellation in ``f(x+h) - f(x-h)`` stays well below the
    tolerance for small gradient entries.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"h must lie in [1e-8, 1e-4], got {h}")
    dtype = np.longdouble if extended else np.float64
    base = [np.array(p, dtype=dtype) for p in params]
    worst = 0.0
    for idx, (p, a) in enumerate(zip(base, analytic)):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != p.shape:
            raise DimensionError(f"analytic gradient {idx} has shape {a.shape}, parameter has {p.shape}")
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(base)
            flat[j] = orig - h
            fm = f(base)
            flat[j] = orig
            numeric = float((fp - fm) / (2 * h))
            an = float(a.reshape(-1)[j])
            err = abs(an - numeric) / max(abs(an), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
