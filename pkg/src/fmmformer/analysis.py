"""Rank structure of attention matrices once a band around the diagonal is
taken out."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import check_matrix, svd
from .oracle import rank_from_spectrum

EPS = 1e-6
DEFAULT_BANDWIDTHS = (0, 5, 10, 20)


@dataclass
class RankProfile:
    source: str
    bandwidth: int
    singular_values: np.ndarray
    eps_rank_abs: int
    eps_rank_rel: int


def remove_band(a, bandwidth: int):
    """Split ``a`` into ``(a - d, d)`` where ``d`` keeps the entries with
    ``|i - j| <= bandwidth``. Bandwidth 0 removes nothing."""
    a = check_matrix(a, "a")
    if bandwidth < 0:
        raise ValueError("bandwidth must be non-negative")
    if bandwidth == 0:
        return a.copy(), np.zeros_like(a)
    i, j = np.indices(a.shape)
    near = np.abs(i - j) <= bandwidth
    return np.where(near, 0.0, a), np.where(near, a, 0.0)


def band_removed_rank(a, bandwidths=DEFAULT_BANDWIDTHS, eps: float = EPS, source: str = "") -> list[RankProfile]:
    bandwidths = list(bandwidths)
    if bandwidths != sorted(bandwidths):
        raise ValueError(f"bandwidths must be ascending, got {bandwidths}")
    profiles = []
    for b in bandwidths:
        rest, _ = remove_band(a, b)
        sigma = svd(rest, compute_vectors=False).singular_values
        profiles.append(RankProfile(source, b, sigma,
                                    rank_from_spectrum(sigma, eps, relative=False),
                                    rank_from_spectrum(sigma, eps, relative=True)))
    return profiles


def harvest_attention(model, tokens, layer: int, head: int) -> list[np.ndarray]:
    """Dense softmax attention matrices of one head, one per sequence."""
    cfg = model.cfg
    if cfg.variant != "softmax":
        raise ValueError(f"harvesting needs a softmax model, got variant {cfg.variant!r}")
    if not 0 <= layer < cfg.layers:
        raise IndexError(f"layer {layer} out of range [0, {cfg.layers})")
    if not 0 <= head < cfg.heads:
        raise IndexError(f"head {head} out of range [0, {cfg.heads})")
    model.forward(tokens, keep_attention=True)
    maps = model.attention_maps[layer][:, head]
    return [np.array(m) for m in maps]


def harvest_many(model, rng, count: int, batch_size: int = 8) -> list[tuple[str, np.ndarray]]:
    """``count`` matrices cycling over every layer and head of fresh copy-task
    batches; sources are labelled ``b<batch>.l<layer>.h<head>.s<sample>``."""
    from .model import Model, gen_copy_batch, pack_batch

    if model.cfg.dtype != "float64":
        # float32 rounding alone would sit near the 1e-6 absolute threshold
        model = Model(replace(model.cfg, dtype="float64"),
                      {k: v.astype(np.float64) for k, v in model.params.items()})
    cfg = model.cfg
    out: list[tuple[str, np.ndarray]] = []
    batch_no = 0
    while len(out) < count:
        tokens = pack_batch(gen_copy_batch(rng, batch_size, cfg.max_len), cfg.max_len).tokens
        model.forward(tokens, keep_attention=True)
        for layer, maps in enumerate(model.attention_maps):
            for head in range(cfg.heads):
                for s in range(maps.shape[0]):
                    if len(out) < count:
                        out.append((f"b{batch_no}.l{layer}.h{head}.s{s}", np.array(maps[s, head], dtype=np.float64)))
        batch_no += 1
    return out


@dataclass
class BandSummary:
    bandwidth: int
    count: int
    median_abs: float
    mean_abs: float
    median_rel: float
    mean_rel: float
    histogram_abs: dict[int, int]


def rank_distribution_report(profiles) -> list[BandSummary]:
    profiles = list(profiles)
    if not profiles:
        raise ValueError("no profiles to summarize")
    by_band: dict[int, list[RankProfile]] = {}
    for p in profiles:
        by_band.setdefault(p.bandwidth, []).append(p)
    report = []
    for b in sorted(by_band):
        ab = np.array([p.eps_rank_abs for p in by_band[b]])
        rel = np.array([p.eps_rank_rel for p in by_band[b]])
        report.append(BandSummary(b, len(ab), float(np.median(ab)), float(ab.mean()),
                                  float(np.median(rel)), float(rel.mean()),
                                  dict(sorted(Counter(ab.tolist()).items()))))
    return report


def medians_non_increasing(report: list[BandSummary], relative: bool = False) -> bool:
    meds = [r.median_rel if relative else r.median_abs for r in report]
    return all(b <= a for a, b in zip(meds, meds[1:]))


# ---------------------------------------------------------------------- csv


def write_profiles_csv(path, profiles) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "bandwidth", "eps_rank_abs", "eps_rank_rel"])
        for p in profiles:
            w.writerow([p.source, p.bandwidth, p.eps_rank_abs, p.eps_rank_rel])


def write_spectra_csv(path, profiles) -> None:
    """Spectra of the matrices themselves, i.e. of the bandwidth-0 profiles."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "index", "sigma"])
        for p in profiles:
            if p.bandwidth != 0:
                continue
            for i, s in enumerate(p.singular_values):
                w.writerow([p.source, i, repr(float(s))])


def write_summary_csv(path, report: list[BandSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bandwidth", "count", "median_abs", "mean_abs", "median_rel", "mean_rel"])
        for r in report:
            w.writerow([r.bandwidth, r.count, r.median_abs, r.mean_abs, r.median_rel, r.mean_rel])


def read_profiles_csv(path) -> list[tuple[str, int, int, int]]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(r["source"], int(r["bandwidth"]), int(r["eps_rank_abs"]), int(r["eps_rank_rel"])) for r in rows]
