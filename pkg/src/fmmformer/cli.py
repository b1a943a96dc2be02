"""Command line: ``fmmformer {verify,train,analyze,lemma1,bench,gradcheck}``.

Exit status 0 on success, 1 when a check fails, 2 on usage or config errors.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, bench, oracle, verify
from .attention import ConfigError
from .config import ConfigFileError, format_config, read_config
from .feature_maps import FeatureMapSet
from .model import Model, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train
from .numerics import make_rng

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
FAULT_ENV = "FMMFORMER_FAULT"


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _maps(text: str) -> FeatureMapSet:
    try:
        return FeatureMapSet(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _echo(command: str, values: dict) -> None:
    print(f"# command = {command}")
    for line in format_config(values).splitlines():
        print(f"# {line}")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ verify


def cmd_verify(args) -> int:
    fault = os.environ.get(FAULT_ENV) or None
    seeds = range(args.seed, args.seed + 5)
    _echo("verify", {"seed": args.seed, "seeds": f"{seeds.start}..{seeds.stop - 1}", "n_max": args.n_max,
                     "bandwidth": args.bandwidth if args.bandwidth is not None else "sweep",
                     "maps": args.maps.tokens() if args.maps is not None else "sweep",
                     "causal": "on" if args.causal else "both", "tolerance": verify.EQUIV_TOL})
    if args.n_max < 1:
        raise UsageError("--n-max must be at least 1")
    lengths = sorted({n for n in verify.EQUIV_LENGTHS if n <= args.n_max} | {args.n_max})
    results = verify.run_equivalence(seeds, lengths, fault=fault, bandwidth=args.bandwidth, maps=args.maps,
                                     causal_modes=(True,) if args.causal else (False, True))
    for r in sorted(verify.worst_by_group(results).values(), key=lambda r: (r.component, r.n, r.causal)):
        print(f"{r.component:10s} N={r.n:<3d} causal={'on ' if r.causal else 'off'} "
              f"worst={r.error:.3e} {'ok' if r.ok else 'FAIL'}")
    failed = [r for r in results if not r.ok]
    if failed:
        worst = max(failed, key=lambda r: r.error)
        print(f"verify: FAIL {len(failed)}/{len(results)} checks; worst {worst.label()} error={worst.error:.3e}")
        return EXIT_FAIL
    print(f"verify: PASS {len(results)} checks")
    return EXIT_OK


# ------------------------------------------------------------------- train


def _train_config(args, variant: str | None = None) -> TrainConfig:
    values = read_config(args.config) if args.config else {}
    for key, raw in values.items():
        try:
            TrainConfig.from_dict({key: raw})
        except (ConfigError, ValueError) as exc:
            raise values.error(key, str(exc)) from None
    try:
        cfg = TrainConfig.from_dict(values)
    except (ConfigError, ValueError) as exc:
        raise ConfigFileError(str(exc), args.config) from None
    overrides = {}
    if variant is not None:
        overrides["variant"] = variant
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "bandwidth", None) is not None:
        overrides["bandwidth"] = args.bandwidth
    if getattr(args, "maps", None) is not None:
        overrides["feature_maps"] = args.maps.tokens()
    return replace(cfg, **overrides) if overrides else cfg


def write_loss_csv(path, losses, variant: str, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "variant", "seed"])
        for step, loss in enumerate(losses):
            w.writerow([step, repr(float(loss)), variant, seed])


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    variants = args.variant.split(",") if args.variant else [None]
    for variant in variants:
        cfg = _train_config(args, variant)
        _echo("train", cfg.to_dict())
        tag = f"{cfg.variant}_seed{cfg.seed}"
        started = time.perf_counter()

        def progress(step, loss, every=max(cfg.steps // 10, 1)):
            if (step + 1) % every == 0:
                print(f"{cfg.variant} step {step + 1}/{cfg.steps} loss {loss:.4f}", flush=True)

        try:
            result = train(cfg, progress)
        except TrainingError as exc:
            print(f"train: {exc}", file=sys.stderr)
            return EXIT_FAIL
        write_loss_csv(out / f"loss_{tag}.csv", result.losses, cfg.variant, cfg.seed)
        save_checkpoint(out / f"{tag}.ckpt", result.model.params)
        (out / f"{tag}.cfg").write_text(format_config(cfg.to_dict()))
        print(f"train: {cfg.variant} final loss {result.final_loss:.6f} "
              f"({time.perf_counter() - started:.1f}s) -> {out / f'loss_{tag}.csv'}")
    return EXIT_OK


# ----------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    out = _out_dir(args.out)
    bandwidths = args.bandwidths
    cfg = _train_config(args, "softmax")
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
        model = Model(replace(cfg, dtype="float64"), params)
    else:
        model = train(cfg).model
    _echo("analyze", {**cfg.to_dict(), "checkpoint": args.checkpoint or "none", "count": args.count,
                      "bandwidths": bandwidths, "eps": analysis.EPS})
    mats = analysis.harvest_many(model, make_rng(args.seed if args.seed is not None else 0), args.count)
    profiles = []
    for source, a in mats:
        profiles.extend(analysis.band_removed_rank(a, bandwidths, source=source))
    report = analysis.rank_distribution_report(profiles)
    analysis.write_profiles_csv(out / "profiles.csv", profiles)
    analysis.write_spectra_csv(out / "spectra.csv", profiles)
    analysis.write_summary_csv(out / "rank_summary.csv", report)
    for r in report:
        print(f"bandwidth {r.bandwidth:3d}: median abs rank {r.median_abs:g} (mean {r.mean_abs:.2f}), "
              f"median rel rank {r.median_rel:g}")
    print(f"analyze: medians non-increasing: {'yes' if analysis.medians_non_increasing(report) else 'no'}")
    return EXIT_OK


# ------------------------------------------------------------------ lemma1


def cmd_lemma1(args) -> int:
    if not 0 < args.delta < 1:
        raise UsageError(f"--delta must lie in (0, 1), got {args.delta}")
    if args.p_max < 1:
        raise UsageError("--p-max must be at least 1")
    size = args.n_max
    _echo("lemma1", {"delta": args.delta, "p_max": args.p_max, "targets": size, "sources": size,
                     "radius": 1.0, "center": 0.0, "kernel": "1/s^2"})
    prob = oracle.SeparatedKernelProblem.grid(size, size, args.delta)
    ps = np.arange(1, args.p_max + 1)
    errors = oracle.lemma1_errors(prob, ps)
    out = _out_dir(args.out)
    with open(out / "lemma1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "max_abs_error"])
        for p, e in zip(ps, errors):
            w.writerow([int(p), repr(float(e))])
            print(f"p={p:2d} max_abs_error={e:.6e}")
    if len(ps) >= 2 and np.all(errors > 0):
        slope = np.polyfit(ps, np.log(errors), 1)[0]
        print(f"lemma1: fitted slope {slope:.4f}, log(delta) {np.log(args.delta):.4f}")
    decreasing = bool(np.all(np.diff(errors) < 0) or np.all(errors[1:] == 0))
    print(f"lemma1: errors strictly decreasing: {'yes' if decreasing else 'no'}")
    return EXIT_OK if decreasing else EXIT_FAIL


# ------------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    variants = args.variant.split(",") if args.variant else ["softmax", "fmm", "linear", "band"]
    for v in variants:
        if v not in bench.BENCH_VARIANTS:
            raise UsageError(f"unknown bench variant {v!r}; choose from {', '.join(bench.BENCH_VARIANTS)}")
    lengths = args.lengths or list(bench.DEFAULT_LENGTHS)
    maps = args.maps if args.maps is not None else FeatureMapSet("elu1,neg_elu1,tanh")
    bw = args.bandwidth if args.bandwidth is not None else 30
    seed = args.seed if args.seed is not None else 0
    meta = {"seed": seed, "bandwidth": bw, "maps": maps.tokens(), "causal": args.causal,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
    _echo("bench", {"variants": variants, "lengths": lengths, "repeats": args.repeats, **meta})

    def progress(r):
        print(f"{r.variant:8s} N={r.n:<6d} fwd={r.fwd_s:.4e}s bwd={r.bwd_s:.4e}s peak={r.peak_bytes}", flush=True)

    try:
        records = bench.run_scaling(variants, lengths, args.repeats, make_rng(seed), progress,
                                    bandwidth=bw, maps=maps, causal=args.causal)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    bench.write_bench_csv(out / "bench.csv", records, meta)
    try:
        fits = bench.fit_slope(records)
    except ValueError as exc:
        print(f"bench: no slope fit ({exc})")
        return EXIT_OK
    for f in fits.values():
        print(f"{f.variant:8s} time slope {f.time_slope:.3f} (R2 {f.time_r2:.3f}), "
              f"memory slope {f.mem_slope:.3f} (R2 {f.mem_r2:.3f})")
    return EXIT_OK


# --------------------------------------------------------------- gradcheck


GRAD_COMPONENTS = ("near", "far", "blend", "model")


def cmd_gradcheck(args) -> int:
    comps = GRAD_COMPONENTS if args.variant in (None, "all") else tuple(args.variant.split(","))
    for c in comps:
        if c not in GRAD_COMPONENTS:
            raise UsageError(f"unknown gradcheck component {c!r}; choose from {', '.join(GRAD_COMPONENTS)}, all")
    n = min(args.n_max, 16)
    if n < 2:
        raise UsageError("--n-max must be at least 2")
    seed = args.seed if args.seed is not None else 0
    seeds = range(seed, seed + args.repeats)
    bw = args.bandwidth if args.bandwidth is not None else 3
    _echo("gradcheck", {"seeds": f"{seeds.start}..{seeds.stop - 1}", "n": n, "bandwidth": bw,
                        "maps": args.maps.tokens() if args.maps is not None else "sweep",
                        "causal": "on" if args.causal else "both", "components": comps, "h": 1e-6,
                        "tolerance": verify.GRAD_TOL})
    results = verify.run_gradchecks(seeds, n, comps, bw, args.maps,
                                    (True,) if args.causal else (False, True), model_n=min(n, 8))
    worst: dict[str, verify.CheckResult] = {}
    for r in results:
        if r.component not in worst or r.error > worst[r.component].error:
            worst[r.component] = r
    for comp, r in worst.items():
        print(f"{comp:10s} worst relative error {r.error:.3e} ({r.label()}) {'ok' if r.ok else 'FAIL'}")
    failed = [r for r in results if not r.ok]
    if failed:
        print(f"gradcheck: FAIL {len(failed)}/{len(results)} checks")
        return EXIT_FAIL
    print(f"gradcheck: PASS {len(results)} checks")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmmformer", description="Banded plus low-rank attention toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="fast paths against dense oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-max", type=int, default=64)
    p.add_argument("--bandwidth", type=int)
    p.add_argument("--maps", type=_maps)
    p.add_argument("--causal", action="store_true", help="check only the causal mode")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train on the copy task")
    p.add_argument("--config")
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", help="one variant or a comma list, one run each")
    p.add_argument("--bandwidth", type=int)
    p.add_argument("--maps", type=_maps)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="epsilon-ranks after band removal")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--out", default="analysis")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--bandwidth", dest="bandwidths", type=_int_list, default=list(analysis.DEFAULT_BANDWIDTHS),
                   help="comma list of bands to remove, ascending")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("lemma1", help="Taylor low-rank error of a separated kernel")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--p-max", type=int, default=10)
    p.add_argument("--n-max", type=int, default=64, help="number of targets and of sources")
    p.add_argument("--out", default="lemma1")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the layout is deterministic")
    p.set_defaults(func=cmd_lemma1)

    p = sub.add_parser("bench", help="time and memory scaling")
    p.add_argument("--variant")
    p.add_argument("--lengths", type=_int_list)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--bandwidth", type=int)
    p.add_argument("--maps", type=_maps)
    p.add_argument("--causal", action="store_true")
    p.add_argument("--out", default="bench")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="analytic gradients against finite differences")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-max", type=int, default=16)
    p.add_argument("--bandwidth", type=int)
    p.add_argument("--maps", type=_maps)
    p.add_argument("--causal", action="store_true")
    p.add_argument("--variant", help="near, far, blend, model, a comma list of these, or all")
    p.add_argument("--repeats", type=int, default=20, help="number of seeds")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigFileError, ConfigError) as exc:
        print(f"fmmformer {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"fmmformer {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
