"""Fast path against dense oracles, and analytic gradients against finite
differences. Shared by the command line and the test suite."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import attention as att
from . import grad as gr
from . import oracle
from .feature_maps import FeatureMapKind, FeatureMapSet
from .numerics import make_rng, rand_matrix

EQUIV_LENGTHS = (1, 2, 7, 16, 33, 64)
EQUIV_TOL = 1e-9
GRAD_TOL = 1e-5
HEAD_DIM = 8
FAULTS = ("near_field", "far_field")


def map_subsets(include_empty: bool = True) -> list[FeatureMapSet]:
    kinds = list(FeatureMapKind)
    subsets = [FeatureMapSet(c) for r in range(len(kinds) + 1) for c in itertools.combinations(kinds, r)]
    return subsets if include_empty else [s for s in subsets if s]


def bandwidths_for(n: int) -> list[int | None]:
    """``{0, 1, 5, N-1}`` restricted to valid bands, plus ``None`` (no band)."""
    bws = sorted({b for b in (0, 1, 5, n - 1) if 0 <= b < n})
    return [*bws, None]


@dataclass
class CheckResult:
    component: str
    n: int
    bandwidth: int | None
    maps: str
    causal: bool
    seed: int
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.error <= self.tol)

    def label(self) -> str:
        bw = "none" if self.bandwidth is None else self.bandwidth
        return (f"{self.component} N={self.n} bandwidth={bw} maps={self.maps or 'none'} "
                f"causal={'on' if self.causal else 'off'} seed={self.seed}")


def equivalence_case(q, k, v, cfg: att.AttentionConfig, seed: int, fault: str | None = None) -> list[CheckResult]:
    """Compare each present component and the blend with its dense oracle."""
    n = q.shape[-2]
    results = []
    common = dict(n=n, bandwidth=cfg.bandwidth, maps=cfg.feature_maps.tokens(), causal=cfg.causal,
                  seed=seed, tol=EQUIV_TOL)
    total = np.zeros_like(v)
    if cfg.has_near:
        d = att.build_near_field(q, k, cfg.bandwidth, cfg.causal)
        if fault == "near_field":
            d.diagonals[..., d.bandwidth, 0] += 1e-6
        fast = att.near_field_apply(d, v, cfg.causal)
        ref = oracle.dense_banded_oracle(q, k, cfg.bandwidth, cfg.causal) @ v
        results.append(CheckResult("near-field", error=float(np.abs(fast - ref).max()), **common))
        total += cfg.blend.w1 * fast
    if cfg.has_far:
        fast = att.far_field_apply(q, k, v, cfg.feature_maps, cfg.causal)
        if fault == "far_field":
            fast[..., 0, 0] += 1e-6
        ref = oracle.dense_lowrank_oracle(q, k, cfg.feature_maps, cfg.causal) @ v
        results.append(CheckResult("far-field", error=float(np.abs(fast - ref).max()), **common))
        total += cfg.blend.w2 * fast
    fused = att.fmm_attention(q, k, v, cfg)
    ref = oracle.dense_fmm_matrix(q, k, cfg) @ v
    err = max(float(np.abs(fused - ref).max()), float(np.abs(total - ref).max()))
    results.append(CheckResult("fmm", error=err, **common))
    return results


def run_equivalence(seeds=range(5), lengths=EQUIV_LENGTHS, n_max: int | None = None, fault: str | None = None,
                    bandwidth: int | None = None, maps=None, causal_modes=(False, True)) -> list[CheckResult]:
    """Sweep lengths, bandwidths, map subsets and causal modes.

    ``bandwidth``/``maps`` pin one setting instead of sweeping it.
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    results = []
    for seed in seeds:
        for n in lengths:
            if n_max is not None and n > n_max:
                continue
            rng = make_rng(seed * 1000 + n)
            q, k, v = (rand_matrix(rng, n, HEAD_DIM, 1.0) for _ in range(3))
            logits = rng.uniform(-2, 2, size=2)
            bws = bandwidths_for(n) if bandwidth is None else [min(bandwidth, n - 1)]
            subsets = map_subsets() if maps is None else [FeatureMapSet(maps)]
            for bw, subset, causal in itertools.product(bws, subsets, causal_modes):
                if bw is None and not subset:
                    continue
                cfg = att.AttentionConfig(bw, subset, causal, att.BlendParams(*logits))
                results.append(equivalence_case(q, k, v, cfg, seed, fault))
    return [r for group in results for r in group]


def worst_by_group(results: list[CheckResult]) -> dict[tuple, CheckResult]:
    """Worst result per (component, N, causal)."""
    worst: dict[tuple, CheckResult] = {}
    for r in results:
        key = (r.component, r.n, r.causal)
        if key not in worst or r.error > worst[key].error:
            worst[key] = r
    return worst


# ---------------------------------------------------------------- gradients


PROBE_SCALE = 1e-2


def _inputs(rng, n: int, d: int = 4):
    """``q, k, v`` plus probe weights ``w`` for the scalar loss ``sum(w * out)``.

    The probe is kept small so that one-ulp wobble of the loss in 80-bit
    arithmetic, divided by ``2h``, stays under the ``1e-8`` floor of the
    relative error at coordinates whose true gradient is exactly zero.
    """
    q, k, v = (rand_matrix(rng, n, d, 1.0) for _ in range(3))
    return q, k, v, rand_matrix(rng, n, d, PROBE_SCALE)


def grad_near(seed: int, n: int, bandwidth: int, causal: bool) -> CheckResult:
    rng = make_rng(seed)
    q, k, v, w = _inputs(rng, n)
    bw = min(bandwidth, n - 1)
    _, saved = gr.near_field_forward(q, k, v, bw, causal)
    g = gr.backward_near_field(saved, w)
    f = lambda p: (w * att.near_field_attention(p[0], p[1], p[2], bw, causal)).sum()  # noqa: E731
    err = gr.fd_check(f, [q, k, v], [g.d_q, g.d_k, g.d_v])
    return CheckResult("near-field", n, bw, "", causal, seed, err, GRAD_TOL)


def grad_far(seed: int, n: int, maps, causal: bool) -> CheckResult:
    rng = make_rng(seed)
    q, k, v, w = _inputs(rng, n)
    maps = FeatureMapSet(maps)
    _, saved = gr.far_field_forward(q, k, v, maps, causal)
    g = gr.backward_far_field(saved, w)
    f = lambda p: (w * att.far_field_apply(p[0], p[1], p[2], maps, causal)).sum()  # noqa: E731
    err = gr.fd_check(f, [q, k, v], [g.d_q, g.d_k, g.d_v])
    return CheckResult("far-field", n, None, maps.tokens(), causal, seed, err, GRAD_TOL)


def grad_blend(seed: int, n: int, bandwidth: int, maps, causal: bool) -> CheckResult:
    rng = make_rng(seed)
    q, k, v, w = _inputs(rng, n)
    logits = rng.uniform(-2, 2, size=2)
    cfg = att.AttentionConfig(min(bandwidth, n - 1), FeatureMapSet(maps), causal, att.BlendParams(*logits))
    _, saved = gr.fmm_forward(q, k, v, cfg)
    g = gr.backward_blend(saved, w)

    def f(p):
        c = replace(cfg, blend=att.BlendParams(*(float(x) for x in p[3])))
        # gates are computed from float64 logits, ample for offsets of size h
        return (w * att.fmm_attention(p[0], p[1], p[2], c)).sum()

    err = gr.fd_check(f, [q, k, v, logits], [g.d_q, g.d_k, g.d_v, np.array(g.d_blend)])
    return CheckResult("blend", n, cfg.bandwidth, cfg.feature_maps.tokens(), causal, seed, err, GRAD_TOL)


def tiny_model_config(seed: int, n: int, variant: str = "fmm"):
    from .model import TrainConfig

    return TrainConfig(variant=variant, layers=2, heads=2, d_model=8, d_ff=16, max_len=n + n % 2,
                       bandwidth=3, feature_maps="elu1,neg_elu1,tanh", w1_logit=0.5, w2_logit=-0.5,
                       batch_size=2, seed=seed)


def grad_model(seed: int, n: int, variant: str = "fmm") -> CheckResult:
    """Whole-network check: every parameter of a tiny model under the
    masked cross-entropy of one copy-task batch."""
    from .model import Model, gen_copy_batch, pack_batch

    cfg = tiny_model_config(seed, n, variant)
    model = Model(cfg)
    batch = pack_batch(gen_copy_batch(make_rng(seed + 1), cfg.batch_size, cfg.max_len), cfg.max_len)
    _, grads = model.loss_and_grads(batch)
    names = sorted(model.params)

    def f(p):
        return PROBE_SCALE * Model(cfg, dict(zip(names, p))).loss_extended(batch)

    err = gr.fd_check(f, [model.params[k] for k in names], [PROBE_SCALE * grads[k] for k in names])
    return CheckResult(f"model-{variant}", cfg.max_len, cfg.bandwidth, cfg.feature_maps, True, seed, err, GRAD_TOL)


def run_gradchecks(seeds=range(20), n: int = 16, components=("near", "far", "blend", "model"),
                   bandwidth: int = 3, maps=None, causal_modes=(False, True), model_n: int = 8) -> list[CheckResult]:
    out = []
    far_sets = map_subsets(include_empty=False) if maps is None else [FeatureMapSet(maps)]
    blend_maps = FeatureMapSet(maps) if maps is not None else FeatureMapSet("elu1,neg_elu1")
    for seed in seeds:
        for causal in causal_modes:
            if "near" in components:
                out.append(grad_near(seed, n, bandwidth, causal))
            if "far" in components:
                out.extend(grad_far(seed, n, s, causal) for s in far_sets)
            if "blend" in components:
                out.append(grad_blend(seed, n, bandwidth, blend_maps, causal))
        if "model" in components:
            out.append(grad_model(seed, model_n))
    return out
