"""Experiment orchestration: per-seed training runs and the method benchmark.

A training run for seed ``s`` generates the scenario with data seed ``s``
(unless the scenario pins its own seed), splits each source domain into
train/validation, trains, and writes ``metrics.csv``, the best checkpoint,
``summary.json`` and figures into ``<out_dir>/seed<s>/``.

The benchmark trains the configured method and its ERM degenerate (moment
penalties zeroed, stage B and C disabled, outer iterations scaled so both see
the same number of optimizer steps) per seed on identical data, evaluates both
on the held-out unseen domain with the best-validation target model, and
aggregates. Aggregates are recomputed and compared on load, so a tampered
result file fails loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, run_config_to_dict
from .data import DomainDataset, generate_scenario, split_train_val
from .errors import ConfigError, FormatError
from .model import checkpoint_save, top1_accuracy
from .trainer import TrainResult, train, write_metrics_csv

__all__ = [
    "SeedRunOutput",
    "run_training",
    "BenchmarkRow",
    "RunResult",
    "run_benchmark",
    "erm_degenerate",
    "save_run_result",
    "load_run_result",
    "ALIGN_REFERENCE_OUTER",
]

# Outer iteration whose alignment value anchors the reduction ratio.
ALIGN_REFERENCE_OUTER = 10


@dataclass
class SeedRunOutput:
    seed: int
    out_dir: Path
    result: TrainResult
    train_sets: list[DomainDataset]
    val_sets: list[DomainDataset]
    unseen: DomainDataset
    summary: dict


def _prepare_data(
    cfg: RunConfig, seed: int
) -> tuple[list[DomainDataset], list[DomainDataset], DomainDataset]:
    spec = cfg.scenario.with_seed(seed)
    domains = generate_scenario(spec)
    sources, unseen = domains[:-1], domains[-1]
    train_sets, val_sets = [], []
    for ds in sources:
        tr, va = split_train_val(ds, cfg.val_fraction, seed)
        train_sets.append(tr)
        val_sets.append(va)
    return train_sets, val_sets, unseen


def _align_series(result: TrainResult) -> dict[int, float]:
    return {
        row.outer_iter: row.align_symkl
        for row in result.metrics
        if row.align_symkl is not None
    }


def run_training(
    cfg: RunConfig, seed: int, out_root: Path | str, figures: bool = True
) -> SeedRunOutput:
    out_dir = Path(out_root) / f"seed{seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    train_sets, val_sets, unseen = _prepare_data(cfg, seed)
    run_cfg = dataclasses.replace(cfg.train, seed=seed)
    result = train(run_cfg, train_sets, val_sets, eval_every=cfg.eval_every)

    write_metrics_csv(result.metrics, out_dir / "metrics.csv")
    checkpoint_save(result.best_model, result.best_ema, out_dir / "checkpoint.bin")

    unseen_target = top1_accuracy(
        result.best_ema.extractor, result.best_ema.global_classifier, unseen.x, unseen.y
    )
    unseen_online = top1_accuracy(
        result.best_model.extractor, result.best_model.global_classifier, unseen.x, unseen.y
    )
    align = _align_series(result)
    summary = {
        "schema_version": 1,
        "scenario": cfg.scenario.name,
        "seed": seed,
        "steps": len(result.metrics),
        "best_outer_iter": result.best_outer_iter,
        "best_val_acc_target": result.best_val_acc_target,
        "best_val_acc_online": result.best_val_acc_online,
        "unseen_acc_target": unseen_target,
        "unseen_acc_online": unseen_online,
        "align_reference_outer": ALIGN_REFERENCE_OUTER,
        "align_at_reference": align.get(ALIGN_REFERENCE_OUTER),
        "align_final": align[max(align)] if align else None,
        "config": run_config_to_dict(cfg),
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if figures:
        from .report import render_run_figures

        render_run_figures(result.metrics, out_dir)
    return SeedRunOutput(seed, out_dir, result, train_sets, val_sets, unseen, summary)


def erm_degenerate(cfg: RunConfig) -> RunConfig:
    """The plain-ERM comparator: moment penalties off, stages B/C off.

    Outer iterations are multiplied by the method's steps-per-outer so both
    arms take the same number of optimizer steps.
    """
    t = cfg.train
    steps_per_outer = max(1, t.stage_a_iters + t.stage_b_iters + t.stage_c_iters)
    erm_train = dataclasses.replace(
        t,
        lambda_mean=0.0,
        lambda_cov=0.0,
        stage_a_iters=max(1, t.stage_a_iters),
        stage_b_iters=0,
        stage_c_iters=0,
        outer_iters=t.outer_iters * steps_per_outer,
    )
    return dataclasses.replace(cfg, train=erm_train)


@dataclass
class BenchmarkRow:
    seed: int
    method: str
    held_out: str
    acc_target: float
    acc_online: float
    align_at_reference: float | None
    align_final: float | None

    @property
    def align_ratio(self) -> float | None:
        if self.align_at_reference in (None, 0.0) or self.align_final is None:
            return None
        return self.align_final / self.align_at_reference


@dataclass
class RunResult:
    scenario: str
    seeds: tuple[int, ...]
    rows: list[BenchmarkRow]
    aggregates: dict[str, dict[str, float | None]]


def _aggregate(rows: Sequence[BenchmarkRow]) -> dict[str, dict[str, float | None]]:
    out: dict[str, dict[str, float | None]] = {}
    for method in sorted({r.method for r in rows}):
        rs = [r for r in rows if r.method == method]
        accs_t = np.array([r.acc_target for r in rs])
        accs_o = np.array([r.acc_online for r in rs])
        ratios = [r.align_ratio for r in rs if r.align_ratio is not None]
        out[method] = {
            "mean_acc_target": float(accs_t.mean()),
            "std_acc_target": float(accs_t.std()),
            "mean_acc_online": float(accs_o.mean()),
            "std_acc_online": float(accs_o.std()),
            "median_align_ratio": float(np.median(ratios)) if ratios else None,
        }
    return out


def run_benchmark(
    cfg: RunConfig,
    seeds: Sequence[int] | None = None,
    out_root: Path | str | None = None,
    figures: bool = True,
) -> RunResult:
    seeds = tuple(seeds) if seeds is not None else cfg.seeds
    if not seeds:
        raise ConfigError("seeds: must list at least one seed")
    out_dir = Path(out_root) if out_root is not None else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arms = {"cmcl": cfg, "erm": erm_degenerate(cfg)}
    rows: list[BenchmarkRow] = []
    for seed in seeds:
        # Both arms consume identical datasets: _prepare_data only reads the
        # scenario spec, which the ERM degenerate shares.
        for method, arm_cfg in arms.items():
            out = run_training(arm_cfg, seed, out_dir / method, figures=False)
            rows.append(
                BenchmarkRow(
                    seed=seed,
                    method=method,
                    held_out=out.unseen.name,
                    acc_target=out.summary["unseen_acc_target"],
                    acc_online=out.summary["unseen_acc_online"],
                    align_at_reference=out.summary["align_at_reference"],
                    align_final=out.summary["align_final"],
                )
            )
    result = RunResult(cfg.scenario.name, seeds, rows, _aggregate(rows))
    save_run_result(result, out_dir / "benchmark_result.json")
    _write_benchmark_table(result, out_dir / "benchmark_table.csv")
    if figures:
        from .report import render_benchmark_figures

        render_benchmark_figures(result, out_dir)
    return result


def _write_benchmark_table(result: RunResult, path: Path) -> None:
    lines = ["method,seed,held_out,acc_target,acc_online,align_at_reference,align_final,align_ratio"]
    for r in result.rows:
        cells = [
            r.method,
            str(r.seed),
            r.held_out,
            repr(r.acc_target),
            repr(r.acc_online),
            "" if r.align_at_reference is None else repr(r.align_at_reference),
            "" if r.align_final is None else repr(r.align_final),
            "" if r.align_ratio is None else repr(r.align_ratio),
        ]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_run_result(result: RunResult, path: Path | str) -> None:
    doc = {
        "schema_version": 1,
        "scenario": result.scenario,
        "seeds": list(result.seeds),
        "rows": [
            {
                "seed": r.seed,
                "method": r.method,
                "held_out": r.held_out,
                "acc_target": r.acc_target,
                "acc_online": r.acc_online,
                "align_at_reference": r.align_at_reference,
                "align_final": r.align_final,
            }
            for r in result.rows
        ],
        "aggregates": result.aggregates,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_run_result(path: Path | str) -> RunResult:
    """Load a benchmark result, re-deriving aggregates to verify consistency."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != 1:
        raise FormatError(f"run result: unsupported schema_version {doc.get('schema_version')!r}")
    rows = [
        BenchmarkRow(
            seed=r["seed"],
            method=r["method"],
            held_out=r["held_out"],
            acc_target=r["acc_target"],
            acc_online=r["acc_online"],
            align_at_reference=r["align_at_reference"],
            align_final=r["align_final"],
        )
        for r in doc["rows"]
    ]
    recomputed = _aggregate(rows)
    stored = doc["aggregates"]
    if set(stored) != set(recomputed):
        raise FormatError("run result: aggregate methods do not match rows")
    for method, agg in recomputed.items():
        for key, value in agg.items():
            got = stored[method].get(key)
            if value is None or got is None:
                if value != got:
                    raise FormatError(f"run result: aggregate {method}.{key} inconsistent")
            elif abs(got - value) > 1e-12:
                raise FormatError(
                    f"run result: aggregate {method}.{key} = {got} but rows give {value}"
                )
    return RunResult(doc["scenario"], tuple(doc["seeds"]), rows, stored)
