"""Command-line front end.

Subcommands::

    cmcl train     --config cfg.json [--seed S] [--out DIR] [--override k=v ...]
    cmcl eval      --checkpoint ckpt.bin --dataset d.cmds [d2.cmds ...]
    cmcl gradcheck [--configs 20] [--tol 1e-5] [--h 1e-6] [--seed 0]
    cmcl benchmark --scenario NAME | --config cfg.json [--seeds 0,1,2] [--out DIR]
    cmcl gen-data  --scenario NAME | --config cfg.json --out DIR [--seed S]

Exit codes: 0 success, 1 verification failure, 2 config/usage error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import SCENARIO_PRESETS, load_run_config, preset_run_config, run_config_to_dict
from .data import dataset_read, dataset_write, generate_scenario
from .errors import CmclError, ConfigError, FormatError, NumericError, ShapeError
from .experiment import run_benchmark, run_training
from .model import checkpoint_load, top1_accuracy
from .verification import run_gradcheck_suite


def _parse_seed_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError as e:
        raise ConfigError(f"--seeds: expected comma-separated integers, got {text!r}") from e


def _load_cfg(args) -> "RunConfig":
    overrides = args.override or []
    if getattr(args, "scenario", None):
        return preset_run_config(args.scenario, overrides)
    if args.config:
        return load_run_config(args.config, overrides)
    raise ConfigError("either --config or --scenario is required")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.override or [])
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    out_root = Path(args.out) if args.out else Path(cfg.out_dir)
    for seed in seeds:
        out = run_training(cfg, seed, out_root, figures=not args.no_figures)
        s = out.summary
        best = "n/a" if s["best_val_acc_target"] is None else f"{s['best_val_acc_target']:.4f}"
        print(
            f"seed {seed}: {s['steps']} steps, best val acc (target) {best}, "
            f"unseen acc (target) {s['unseen_acc_target']:.4f} -> {out.out_dir}"
        )
    return 0


def cmd_eval(args) -> int:
    model, ema = checkpoint_load(args.checkpoint)
    for path in args.dataset:
        ds = dataset_read(path)
        if ds.input_dim != model.input_dim or ds.class_count != model.class_count:
            raise ShapeError(
                f"{path}: dataset ({ds.input_dim} dims, {ds.class_count} classes) does not "
                f"match checkpoint ({model.input_dim} dims, {model.class_count} classes)"
            )
        acc_target = top1_accuracy(ema.extractor, ema.global_classifier, ds.x, ds.y)
        acc_online = top1_accuracy(model.extractor, model.global_classifier, ds.x, ds.y)
        print(f"{ds.name} (M={len(ds)}, K={ds.class_count}):")
        print(f"  target model accuracy  {acc_target:.6f}")
        print(f"  online model accuracy  {acc_online:.6f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(
        configs_per_loss=args.configs, h=args.h, tol=args.tol, seed=args.seed
    )
    for res in results:
        print(res.line())
        if not res.passed:
            w = res.worst_report
            print(
                f"  worst coordinate: {w.worst_param}{list(w.worst_index)} "
                f"rel_error={w.max_rel_error:.3e}"
            )
    ok = all(r.passed for r in results)
    print(
        f"overall: {'PASS' if ok else 'FAIL'} "
        f"(tol {args.tol:g}, h {args.h:g}, {args.configs} configs per loss)"
    )
    return 0 if ok else 1


def cmd_benchmark(args) -> int:
    cfg = _load_cfg(args)
    seeds = _parse_seed_list(args.seeds) if args.seeds else list(cfg.seeds)
    out_root = Path(args.out) if args.out else Path(cfg.out_dir)
    result = run_benchmark(cfg, seeds, out_root, figures=not args.no_figures)
    header = f"{'method':<8}{'seed':<6}{'held_out':<10}{'acc_target':<12}{'acc_online':<12}{'align_ratio':<12}"
    print(header)
    for r in result.rows:
        ratio = "" if r.align_ratio is None else f"{r.align_ratio:.4f}"
        print(
            f"{r.method:<8}{r.seed:<6}{r.held_out:<10}{r.acc_target:<12.4f}"
            f"{r.acc_online:<12.4f}{ratio:<12}"
        )
    for method, agg in result.aggregates.items():
        ratio = agg["median_align_ratio"]
        ratio_text = "n/a" if ratio is None else f"{ratio:.4f}"
        print(
            f"{method}: mean acc_target {agg['mean_acc_target']:.4f} "
            f"(std {agg['std_acc_target']:.4f}), median align ratio {ratio_text}"
        )
    print(f"results -> {out_root}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    spec = cfg.scenario.with_seed(args.seed if args.seed is not None else cfg.seeds[0])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ds in generate_scenario(spec):
        path = out_dir / f"{ds.name}.cmds"
        dataset_write(ds, path)
        print(f"wrote {path} (M={len(ds)}, input_dim={ds.input_dim}, K={ds.class_count})")
    with open(out_dir / "scenario.json", "w", encoding="utf-8") as fh:
        json.dump(run_config_to_dict(cfg)["scenario"] | {"seed": spec.seed}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmcl",
        description="Multi-domain classifier training via cross-domain likelihood "
        "maximization with moment matching and an EMA target model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a scenario config, one run per seed")
    p.add_argument("--config", required=True, help="path to a run-config JSON file")
    p.add_argument("--seed", type=int, default=None, help="train a single seed instead of the config's list")
    p.add_argument("--out", default=None, help="output root (default: config out_dir)")
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted-path config override")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on dataset files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, nargs="+", help="one or more .cmds dataset files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss suite")
    p.add_argument("--configs", type=int, default=20, help="random toy configs per loss")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error")
    p.add_argument("--h", type=float, default=1e-6, help="central-difference step")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="compare the method against its ERM degenerate")
    p.add_argument("--scenario", default=None, help=f"preset name, one of {sorted(SCENARIO_PRESETS)}")
    p.add_argument("--config", default=None, help="path to a run-config JSON file")
    p.add_argument("--seeds", default=None, help="comma-separated seed list (default: config seeds)")
    p.add_argument("--out", default=None)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gen-data", help="write scenario domains as dataset files")
    p.add_argument("--scenario", default=None, help=f"preset name, one of {sorted(SCENARIO_PRESETS)}")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="data seed (default: first config seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CmclError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
