"""Linear-cost attention: banded near field, kernelized far field, blending.

All functions accept single sequences (``N x D`` arrays) or batches with any
number of leading axes (``... x N x D``). Nothing here materializes an
``N x N`` matrix except the intra-chunk blocks of the causal far field, whose
size is fixed by ``CHUNK``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .feature_maps import FeatureMapSet, apply
from .numerics import DimensionError, NumericError, check_matrix, row_softmax

DEN_FLOOR = 1e-8
CHUNK = 64


class ConfigError(ValueError):
    """Invalid attention or training configuration."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.result_type(x, np.float64))
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


@dataclass(frozen=True)
class BlendParams:
    """Pre-sigmoid gate logits for the near- and far-field components.

    The defaults put the near-field gate almost closed and the far-field gate
    almost open.
    """

    raw_w1: float = -4.0
    raw_w2: float = 4.0

    @property
    def w1(self) -> float:
        return float(sigmoid(self.raw_w1))

    @property
    def w2(self) -> float:
        return float(sigmoid(self.raw_w2))


@dataclass(frozen=True)
class AttentionConfig:
    bandwidth: int | None = 5
    feature_maps: FeatureMapSet = field(default_factory=lambda: FeatureMapSet(["elu1"]))
    causal: bool = False
    blend: BlendParams = field(default_factory=BlendParams)

    def __post_init__(self):
        object.__setattr__(self, "feature_maps", FeatureMapSet(self.feature_maps))
        if self.bandwidth is not None:
            if int(self.bandwidth) != self.bandwidth or self.bandwidth < 0:
                raise ConfigError(f"bandwidth must be a non-negative integer or None, got {self.bandwidth!r}")
            object.__setattr__(self, "bandwidth", int(self.bandwidth))
        if self.bandwidth is None and not self.feature_maps:
            raise ConfigError("attention config needs a band, feature maps, or both")

    @property
    def has_near(self) -> bool:
        return self.bandwidth is not None

    @property
    def has_far(self) -> bool:
        return len(self.feature_maps) > 0

    def to_dict(self) -> dict:
        return {
            "bandwidth": "none" if self.bandwidth is None else self.bandwidth,
            "feature_maps": self.feature_maps.tokens() or "none",
            "causal": self.causal,
            "w1_logit": self.blend.raw_w1,
            "w2_logit": self.blend.raw_w2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionConfig":
        bw = d.get("bandwidth", 5)
        if isinstance(bw, str):
            bw = None if bw.strip().lower() == "none" else int(bw)
        causal = d.get("causal", False)
        if isinstance(causal, str):
            causal = _parse_bool(causal)
        return cls(
            bandwidth=bw,
            feature_maps=FeatureMapSet(d.get("feature_maps", "elu1")),
            causal=bool(causal),
            blend=BlendParams(float(d.get("w1_logit", -4.0)), float(d.get("w2_logit", 4.0))),
        )


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# ---------------------------------------------------------------- near field


def band_offsets(bandwidth: int, causal: bool) -> np.ndarray:
    """Column offsets ``j - i`` stored per row."""
    return np.arange(-bandwidth, 1 if causal else bandwidth + 1)


def band_valid(n: int, offsets: np.ndarray) -> np.ndarray:
    cols = np.arange(n)[:, None] + offsets[None, :]
    return (cols >= 0) & (cols < n)


def shifted(xp: np.ndarray, pad: int, offset: int, n: int) -> np.ndarray:
    """Rows ``i + offset`` of a sequence zero-padded by ``pad`` on both ends."""
    return xp[..., pad + offset : pad + offset + n, :]


def pad_seq(x: np.ndarray, pad: int) -> np.ndarray:
    widths = [(0, 0)] * x.ndim
    widths[-2] = (pad, pad)
    return np.pad(x, widths)


def band_probs(q: np.ndarray, k: np.ndarray, bandwidth: int, causal: bool):
    """In-band softmax weights in diagonal layout, one row of
    ``len(offsets)`` slots per query (reference path, one pass per offset).

    Out-of-range (and, when causal, future) slots get weight exactly 0.
    """
    n, d = q.shape[-2:]
    offsets = band_offsets(bandwidth, causal)
    kp = pad_seq(k, bandwidth)
    logits = np.empty(q.shape[:-1] + (len(offsets),), dtype=np.result_type(q, k))
    for w, off in enumerate(offsets):
        logits[..., w] = np.einsum("...nd,...nd->...n", q, shifted(kp, bandwidth, off, n))
    logits *= 1 / math.sqrt(d)
    logits = np.where(band_valid(n, offsets), logits, -np.inf)
    return row_softmax(logits), offsets


def band_apply(probs: np.ndarray, v: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    n = v.shape[-2]
    pad = int(np.abs(offsets).max()) if len(offsets) else 0
    vp = pad_seq(v, pad)
    out = np.zeros(probs.shape[:-1] + v.shape[-1:], dtype=np.result_type(probs, v))
    for w, off in enumerate(offsets):
        out += probs[..., w, None] * shifted(vp, pad, off, n)
    return out


MIN_BLOCK = 16


class BandLayout:
    """Blocked sliding-window layout for banded attention.

    The sequence is cut into blocks of ``s >= bandwidth`` rows. Queries of
    block ``b`` only see keys from blocks ``b-1, b, b+1`` (``b-1, b`` when
    causal), so every band entry lives in a dense ``s x 3s`` tile and the
    work is a batch of small matrix products: ``O(N * s * D)`` overall.
    """

    def __init__(self, n: int, bandwidth: int, causal: bool):
        self.n, self.bandwidth, self.causal = n, bandwidth, causal
        size = max(bandwidth, MIN_BLOCK)
        if size >= n:
            self.size, self.n_blocks, self.lead, self.width = n, 1, 0, n
        else:
            self.size = size
            self.n_blocks = -(-n // size)
            self.lead = size
            self.width = size * (2 if causal else 3)
        s = self.size
        i = np.arange(self.n_blocks)[:, None, None] * s + np.arange(s)[None, :, None]
        j = np.arange(self.n_blocks)[:, None, None] * s - self.lead + np.arange(self.width)[None, None, :]
        valid = (np.abs(j - i) <= bandwidth) & (j >= 0) & (j < n)
        if causal:
            valid &= j <= i
        # padded query rows keep one slot so their softmax stays defined
        valid |= (i >= n) & (j == i)
        self.valid = valid
        self.rows = i[..., 0]
        self.cols = j[:, 0, :]

    @property
    def padded(self) -> int:
        return self.n_blocks * self.size

    def blocks(self, x):
        """``(..., n, d) -> (..., n_blocks, s, d)`` with zero padding."""
        if self.padded != self.n:
            widths = [(0, 0)] * x.ndim
            widths[-2] = (0, self.padded - self.n)
            x = np.pad(x, widths)
        return x.reshape(x.shape[:-2] + (self.n_blocks, self.size, x.shape[-1]))

    def unblock(self, xb):
        x = xb.reshape(xb.shape[:-3] + (self.padded, xb.shape[-1]))
        return x[..., : self.n, :]

    def context(self, x):
        """Keys/values visible to each query block: ``(..., n_blocks, width, d)``."""
        xb = self.blocks(x)
        if self.n_blocks == 1:
            return xb
        zero = np.zeros_like(xb[..., :1, :, :])
        parts = [np.concatenate([zero, xb[..., :-1, :, :]], axis=-3), xb]
        if not self.causal:
            parts.append(np.concatenate([xb[..., 1:, :, :], zero], axis=-3))
        return np.concatenate(parts, axis=-2)

    def scatter_context(self, dctx):
        """Adjoint of ``context``: fold tile gradients back onto the sequence."""
        if self.n_blocks == 1:
            return self.unblock(dctx)
        s = self.size
        out = dctx[..., s : 2 * s, :].copy()
        out[..., :-1, :, :] += dctx[..., 1:, :s, :]
        if not self.causal:
            out[..., 1:, :, :] += dctx[..., :-1, 2 * s :, :]
        return self.unblock(out)

    def to_diagonals(self, probs) -> np.ndarray:
        """Tile weights to ``(..., 2k+1, n)`` diagonal storage."""
        k, n = self.bandwidth, self.n
        rows = np.arange(n)
        diag = np.zeros(probs.shape[:-3] + (2 * k + 1, n), dtype=probs.dtype)
        for o in range(2 * k + 1):
            j = rows + o - k
            ok = (j >= 0) & (j < n)
            if self.causal:
                ok &= j <= rows
            i = rows[ok]
            b = i // self.size
            diag[..., o, i] = probs[..., b, i - b * self.size, j[ok] - b * self.size + self.lead]
        return diag


def _masked_softmax(logits, valid):
    logits = np.where(valid, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def band_tiles(q, k, layout: BandLayout):
    """Softmax weights per tile, ``(..., n_blocks, s, width)``, plus the
    blocked queries and key context (kept for the backward pass)."""
    qb = np.ascontiguousarray(layout.blocks(q))
    kc = layout.context(k)
    logits = qb @ np.swapaxes(kc, -1, -2)
    logits *= 1 / math.sqrt(q.shape[-1])
    return _masked_softmax(logits, layout.valid), qb, kc


@dataclass(frozen=True)
class BandedMatrix:
    """Diagonal storage of an ``n x n`` matrix with half-bandwidth ``k``.

    ``diagonals[..., o, i]`` holds entry ``(i, i + o - k)``; slots falling
    outside the matrix are zero.
    """

    n: int
    bandwidth: int
    diagonals: np.ndarray
    causal: bool = False

    @property
    def rows(self) -> np.ndarray:
        """Row-major view: ``rows[..., i, o] == diagonals[..., o, i]``."""
        return np.swapaxes(self.diagonals, -1, -2)

    def to_dense(self) -> np.ndarray:
        k, n = self.bandwidth, self.n
        dense = np.zeros(self.diagonals.shape[:-2] + (n, n), dtype=self.diagonals.dtype)
        rows = self.rows
        for o in range(2 * k + 1):
            i = np.arange(max(0, k - o), min(n, n + k - o))
            dense[..., i, i + o - k] = rows[..., i, o]
        return dense

    def __getitem__(self, ij):
        i, j = ij
        if abs(i - j) > self.bandwidth:
            raise IndexError(f"entry ({i}, {j}) lies outside bandwidth {self.bandwidth}")
        return self.diagonals[..., j - i + self.bandwidth, i]


def _check_qkv(q, k, v=None):
    q = check_matrix(q, "q", allow_batch=True)
    k = check_matrix(k, "k", allow_batch=True)
    if q.shape != k.shape:
        raise DimensionError(f"q and k shapes differ: {q.shape} vs {k.shape}")
    if v is None:
        return q, k
    v = check_matrix(v, "v", allow_batch=True)
    if v.shape[:-1] != q.shape[:-1]:
        raise DimensionError(f"v shape {v.shape} does not match sequence shape {q.shape[:-1]}")
    return q, k, v


def _check_bandwidth(bandwidth, n):
    if bandwidth is None or int(bandwidth) != bandwidth or bandwidth < 0:
        raise ConfigError(f"bandwidth must be a non-negative integer, got {bandwidth!r}")
    if bandwidth >= n:
        raise ConfigError(f"bandwidth {bandwidth} must be smaller than the sequence length {n}")
    return int(bandwidth)


def build_near_field(q, k_mat, bandwidth: int, causal: bool = False) -> BandedMatrix:
    """Banded softmax attention weights, normalized within the band.

    Only the ``2k+1`` products per query are formed. With ``causal=True`` the
    future slots are excluded before normalization, so every row depends on
    past and present positions only.
    """
    q, k_mat = _check_qkv(q, k_mat)
    n = q.shape[-2]
    bandwidth = _check_bandwidth(bandwidth, n)
    layout = BandLayout(n, bandwidth, causal)
    probs = band_tiles(q, k_mat, layout)[0]
    return BandedMatrix(n, bandwidth, layout.to_diagonals(probs), causal)


def near_field_apply(d: BandedMatrix, v, causal: bool = False) -> np.ndarray:
    """Multiply the banded matrix by ``v`` touching only stored bands.

    With ``causal=True`` on a matrix built without the mask, future entries
    are dropped and each row is rescaled to sum to one again.
    """
    v = check_matrix(v, "v", allow_batch=True)
    if v.shape[-2] != d.n:
        raise DimensionError(f"banded matrix has n={d.n}, v has {v.shape[-2]} rows")
    k = d.bandwidth
    rows = d.rows
    offsets = band_offsets(k, False)
    if causal and not d.causal:
        rows = rows[..., : k + 1]
        rows = rows / rows.sum(axis=-1, keepdims=True)
        offsets = offsets[: k + 1]
    elif d.causal:
        rows = rows[..., : k + 1]
        offsets = offsets[: k + 1]
    return band_apply(rows, v, offsets)


def near_field_attention(q, k_mat, v, bandwidth: int, causal: bool = False) -> np.ndarray:
    q, k_mat, v = _check_qkv(q, k_mat, v)
    bandwidth = _check_bandwidth(bandwidth, q.shape[-2])
    layout = BandLayout(q.shape[-2], bandwidth, causal)
    probs = band_tiles(q, k_mat, layout)[0]
    return layout.unblock(probs @ layout.context(v))


# ----------------------------------------------------------------- far field


def linear_scan(a, b, c, causal: bool, reverse: bool = False, chunk: int = CHUNK) -> np.ndarray:
    """``y_i = sum_j (a_i . b_j) c_j`` over ``j <= i`` (causal), ``j >= i``
    (causal and reverse) or all ``j``.

    The causal sum runs chunk by chunk: a masked ``chunk x chunk`` product
    inside each chunk plus a running ``b^T c`` state carried across chunks.
    """
    if not causal:
        return a @ (np.swapaxes(b, -1, -2) @ c)
    n = a.shape[-2]
    size = min(chunk, n)
    n_chunks = -(-n // size)
    total = n_chunks * size

    def blocks(x):
        if total != n:
            widths = [(0, 0)] * x.ndim
            widths[-2] = (0, total - n)
            x = np.pad(x, widths)
        return x.reshape(x.shape[:-2] + (n_chunks, size, x.shape[-1]))

    ab, bb, cb = blocks(a), blocks(b), blocks(c)
    scores = ab @ np.swapaxes(bb, -1, -2)
    tri = np.tril if not reverse else np.triu
    scores *= tri(np.ones((size, size), dtype=scores.dtype))
    y = scores @ cb
    if n_chunks > 1:
        sums = np.swapaxes(bb, -1, -2) @ cb
        states = np.zeros_like(sums)
        if reverse:
            # exclusive suffix sums: chunk t sees chunks t+1 .. end
            states[..., -2::-1, :, :] = np.cumsum(sums[..., :0:-1, :, :], axis=-3)
        else:
            np.cumsum(sums[..., :-1, :, :], axis=-3, out=states[..., 1:, :, :])
        y += ab @ states
    y = y.reshape(y.shape[:-3] + (total, y.shape[-1]))
    return y[..., :n, :]


def floor_denominator(den):
    """Push denominators with magnitude below ``DEN_FLOOR`` out to
    ``+-DEN_FLOOR`` keeping their sign; returns the floored values and the
    clamp mask."""
    clamped = np.abs(den) < DEN_FLOOR
    floor = np.where(den < 0, -DEN_FLOOR, DEN_FLOOR).astype(den.dtype)
    safe = np.where(clamped, floor, den)
    return safe, clamped


def with_ones(v):
    return np.concatenate([v, np.ones(v.shape[:-1] + (1,), dtype=v.dtype)], axis=-1)


def far_field_term(q, k, v, kind, causal: bool):
    """One rank-one-per-feature term; returns output, features and floored
    denominators."""
    fq, fk = apply(kind, q), apply(kind, k)
    y = linear_scan(fq, fk, with_ones(v), causal)
    den, clamped = floor_denominator(y[..., -1])
    out = y[..., :-1] / den[..., None]
    return out, fq, fk, den, clamped


def far_field_stack(q, k, v, maps, causal: bool):
    """All far-field terms at once, maps stacked on a new leading axis.

    Returns per-term outputs, features and floored denominators, each with
    the leading map axis.
    """
    fq = np.stack([apply(kind, q) for kind in maps])
    fk = np.stack([apply(kind, k) for kind in maps])
    y = linear_scan(fq, fk, with_ones(v), causal)
    den, clamped = floor_denominator(y[..., -1])
    out = y[..., :-1] / den[..., None]
    return out, fq, fk, den, clamped


def far_field_apply(q, k_mat, v, maps, causal: bool = False) -> np.ndarray:
    """Sum over feature maps of row-normalized kernelized attention."""
    q, k_mat, v = _check_qkv(q, k_mat, v)
    maps = FeatureMapSet(maps)
    if not maps:
        raise ConfigError("far_field_apply needs at least one feature map")
    out = far_field_stack(q, k_mat, v, maps, causal)[0].sum(axis=0)
    if not np.all(np.isfinite(out)):
        raise NumericError("far field produced non-finite values")
    return out


class CausalState:
    """Running ``S_i = sum_{j<=i} phi(k_j) v_j^T`` and ``z_i = sum_{j<=i} phi(k_j)``
    for every feature map; lets a sequence be attended one position at a time."""

    def __init__(self, maps, d: int, dv: int):
        self.maps = FeatureMapSet(maps)
        self.s = np.zeros((len(self.maps), d, dv))
        self.z = np.zeros((len(self.maps), d))
        self.position = 0

    def step(self, q_i, k_i, v_i) -> np.ndarray:
        """Absorb position ``i`` and return its far-field output row."""
        out = np.zeros(len(v_i))
        for l, kind in enumerate(self.maps):
            fk = apply(kind, np.asarray(k_i, dtype=float))
            self.s[l] += np.outer(fk, v_i)
            self.z[l] += fk
            fq = apply(kind, np.asarray(q_i, dtype=float))
            den, _ = floor_denominator(fq @ self.z[l])
            out += (fq @ self.s[l]) / den
        self.position += 1
        return out


# ------------------------------------------------------------------- blended


def fmm_attention(q, k_mat, v, cfg: AttentionConfig) -> np.ndarray:
    """Gated sum ``w1 * near + w2 * far`` with sigmoid-positive gates."""
    q, k_mat, v = _check_qkv(q, k_mat, v)
    out = np.zeros(v.shape, dtype=np.result_type(q, v))
    if cfg.has_near:
        d = build_near_field(q, k_mat, cfg.bandwidth, causal=cfg.causal)
        out += cfg.blend.w1 * near_field_apply(d, v, causal=cfg.causal)
    if cfg.has_far:
        out += cfg.blend.w2 * far_field_apply(q, k_mat, v, cfg.feature_maps, causal=cfg.causal)
    return out
