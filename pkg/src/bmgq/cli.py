"""Command-line entry points: train, evaluate, gradcheck, compare.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
Outputs go under ``--out`` or, by default, a subdirectory of ``$BMGQ_OUTPUT_ROOT``
(``./runs`` when unset).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .qnet.checkpoint import VERSION as FORMAT_VERSION, CheckpointError
from .qnet.gradcheck import DEFAULT_MODES, gradient_check
from .train.loop import CURVE_FIELDS, METRIC_FIELDS, VARIANTS, config_fingerprint, evaluate, evaluate_checkpoint, train

LOG = logging.getLogger("bmgq")
OUTPUT_ROOT_ENV = "BMGQ_OUTPUT_ROOT"
GRADCHECK_TOL = 1e-4
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(arg: Optional[str], default_name: str) -> Path:
    out = Path(arg) if arg else output_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    kw = {}
    if getattr(args, "variant", None):
        kw["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "episodes", None) is not None:
        if args.episodes < 1:
            raise UsageError("--episodes must be >= 1")
        kw["episodes"] = args.episodes
    if getattr(args, "aggregator", None):
        kw["aggregator"] = args.aggregator
    try:
        return cfg.with_train(**kw) if kw else cfg
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None


def write_curve(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([r[f] if isinstance(r[f], int) else repr(float(r[f])) for f in CURVE_FIELDS])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, argv: Sequence[str], outputs: dict) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_ini": cfg.to_ini(),
        "fingerprint": config_fingerprint(cfg.train, cfg.sim),
        "seeds": {"train": cfg.train.seed, "eval": cfg.eval_seed},
        "versions": {"package": __version__, "checkpoint_format": FORMAT_VERSION, "numpy": np.__version__,
                     "python": platform.python_version()},
        "outputs": outputs,
        "started_at_unix": time.time(),
    }
    path = out / "manifest.json"
    if path.exists():
        path.unlink()
    write_json(path, manifest)
    return path


def _train_one(cfg: ExperimentConfig, out: Path, argv: Sequence[str], quiet: bool = False) -> dict:
    t = cfg.train
    ckpt_dir = out / "checkpoints"
    outputs = {"curve": "curve.csv", "episodes": "episodes.jsonl", "timings": "timings.json"}
    if t.variant != "greedy":
        outputs["checkpoints"] = "checkpoints/"
    write_manifest(out, cfg, "train", argv, outputs)
    (out / "config.ini").write_text(cfg.to_ini())
    t0 = time.perf_counter()

    def progress(row):
        if not quiet:
            LOG.info("%s ep %d eps %.3f reward %.1f loss %.4g service %.3f", t.variant, row["episode"],
                     row["epsilon"], row["cumulative_reward"], row["loss_mean"], row["service_rate"])

    result = train(t, cfg.sim, ckpt_dir if t.variant != "greedy" else None, progress)
    elapsed = time.perf_counter() - t0
    write_curve(out / "curve.csv", result.curve)
    with open(out / "episodes.jsonl", "w") as fh:
        for i, rec in enumerate(result.episode_metrics):
            fh.write(json.dumps({"episode": i, **rec}, sort_keys=True) + "\n")
    write_json(out / "timings.json", {"train_seconds": elapsed, "episodes": t.episodes})
    return {"result": result, "seconds": elapsed}


def cmd_train(args, argv) -> int:
    cfg = _load(args)
    out = _out_dir(args.out, f"train-{cfg.train.variant}-seed{cfg.train.seed}")
    info = _train_one(cfg, out, argv)
    last = info["result"].curve[-1] if info["result"].curve else {}
    print(f"trained {cfg.train.variant} for {cfg.train.episodes} episodes in {info['seconds']:.1f}s; "
          f"last reward {last.get('cumulative_reward', float('nan')):.1f}; outputs in {out}")
    return EXIT_OK


def _summary_line(label: str, s: dict) -> str:
    ob = s.get("overestimation_bias_mean")
    return (f"{label:<24} reward {s['cumulative_total_reward_mean']:10.1f} ± {s['cumulative_total_reward_std']:8.1f}  "
            f"service {s['service_rate_mean']:.3f}  wait {s['avg_waiting_min_mean']:.2f}  "
            f"detour {s['avg_detour_min_mean']:.2f}  vkt {s['vehicle_km_traveled_mean']:.2f}  "
            f"overest {'n/a' if ob is None else f'{ob:.2f}'}")


def cmd_evaluate(args, argv) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if any(not s > 0 for s in args.fleet_scale):
        raise UsageError("--fleet-scale values must be positive")
    cfg = _load(args)
    t = cfg.train
    if t.variant != "greedy" and not args.checkpoint:
        raise UsageError(f"variant {t.variant} needs --checkpoint")
    if args.checkpoint and not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    out = _out_dir(args.out, f"eval-{t.variant}-seed{t.seed}")
    outputs = {f"{s:g}": f"eval_fleet{s:g}.json" for s in args.fleet_scale}
    write_manifest(out, cfg, "evaluate", argv, outputs)
    for scale in args.fleet_scale:
        if t.variant == "greedy":
            summary = evaluate(None, t, cfg.sim, args.n, scale, cfg.eval_seed)
        else:
            summary = evaluate_checkpoint(args.checkpoint, t, cfg.sim, args.n, scale, cfg.eval_seed)
        write_json(out / outputs[f"{scale:g}"], summary)
        print(_summary_line(f"{t.variant} N={summary['n_vehicles']}", summary))
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    t0 = time.perf_counter()
    report = gradient_check(seed=args.seed, trials=args.trials, modes=args.modes,
                            coords_per_layer=None if args.coords == 0 else args.coords, corrupt=args.corrupt)
    elapsed = time.perf_counter() - t0
    ok = True
    for mode in args.modes:
        err = report.max_rel_error[mode]
        ok &= err <= GRADCHECK_TOL
        print(f"{mode:<16} max rel error {err:.3e} (worst layer {report.worst_layer[mode]}, "
              f"{report.n_checked[mode]} checks)")
    print(f"max relative error {report.overall:.3e} over {args.trials} trials in {elapsed:.1f}s: "
          f"{'PASS' if ok else 'FAIL'} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_compare(args, argv) -> int:
    base = _load(args)
    runs = []  # (label, variant, aggregator)
    for v in args.variants:
        if v == "bmgq" and args.aggregators:
            runs.extend((f"bmgq-{a}", v, a) for a in args.aggregators)
        else:
            runs.append((v, v, base.train.aggregator))
    if len(runs) < 2:
        raise UsageError("compare needs at least two variants (or aggregators)")
    seeds = args.seeds if args.seeds else [base.train.seed]
    n_eval = args.n if args.n is not None else base.eval_episodes
    if n_eval < 1:
        raise UsageError("--n must be >= 1")
    out = _out_dir(args.out, "compare")
    (out / "curves").mkdir(exist_ok=True)
    write_manifest(out, base, "compare", argv, {"curves": "curves/", "table": "comparison.csv",
                                                 "summaries": "summaries.json"})
    rows, summaries = [], {}
    for seed in seeds:
        for label, variant, agg in runs:
            cfg = base.with_train(variant=variant, aggregator=agg, seed=seed)
            run_dir = out / "runs" / f"{label}-seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            info = _train_one(cfg, run_dir, argv, quiet=True)
            write_curve(out / "curves" / f"{label}_seed{seed}.csv", info["result"].curve)
            summary = evaluate(info["result"].online, cfg.train, cfg.sim, n_eval, 1.0, cfg.eval_seed)
            summaries[f"{label}-seed{seed}"] = summary
            row = {"label": label, "seed": seed, "train_seconds": round(info["seconds"], 3)}
            for m in METRIC_FIELDS:
                row[f"{m}_mean"] = summary[f"{m}_mean"]
                row[f"{m}_std"] = summary[f"{m}_std"]
            rows.append(row)
            print(_summary_line(f"{label} seed {seed}", summary), flush=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_json(out / "summaries.json", summaries)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bmgq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per episode")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant_default=None):
        sp.add_argument("--config", required=True, help="INI experiment config")
        sp.add_argument("--variant", choices=VARIANTS, default=variant_default)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--out", help="output directory")

    tr = sub.add_parser("train", help="train one variant")
    common(tr)
    tr.add_argument("--episodes", type=int)
    tr.add_argument("--aggregator", choices=("gat_transformer", "mean", "max"))
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint (or greedy) on held-out demand")
    common(ev)
    ev.add_argument("--checkpoint")
    ev.add_argument("--n", type=int, default=20, help="evaluation episodes")
    ev.add_argument("--fleet-scale", type=float, nargs="+", default=[1.0])
    ev.add_argument("--aggregator", choices=("gat_transformer", "mean", "max"))
    ev.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--trials", type=int, default=20)
    gc.add_argument("--modes", nargs="+", choices=DEFAULT_MODES + ("none",), default=list(DEFAULT_MODES))
    gc.add_argument("--coords", type=int, default=24, help="entries checked per layer (0 = all)")
    gc.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    cp = sub.add_parser("compare", help="train and evaluate several variants on identical seeds")
    cp.add_argument("--config", required=True)
    cp.add_argument("--variants", nargs="+", choices=VARIANTS, required=True)
    cp.add_argument("--aggregators", nargs="+", choices=("gat_transformer", "mean", "max"))
    cp.add_argument("--episodes", type=int)
    cp.add_argument("--seeds", type=int, nargs="+")
    cp.add_argument("--n", type=int, help="evaluation episodes per run")
    cp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    cp.add_argument("--out")
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"bmgq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"bmgq: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"bmgq: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # variant and checkpoint network mismatch surface here
        print(f"bmgq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
