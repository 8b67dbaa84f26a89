"""Render training and benchmark figures to files next to the CSV output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .trainer import MetricsRow

__all__ = ["render_run_figures", "render_benchmark_figures"]

_STAGE_COLORS = {"A": "tab:blue", "B": "tab:orange", "C": "tab:green"}


def render_run_figures(rows: Sequence[MetricsRow], out_dir: Path | str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    series = {
        "A: ce + moments": [(i, r.loss_total) for i, r in enumerate(rows) if r.stage == "A"],
        "B: head refit": [(i, r.loss_dsc) for i, r in enumerate(rows) if r.stage == "B"],
        "C: cross-domain": [(i, r.loss_cdl) for i, r in enumerate(rows) if r.stage == "C"],
    }
    for (label, points), color in zip(series.items(), _STAGE_COLORS.values()):
        if points:
            xs, ys = zip(*points)
            ax.plot(xs, ys, ".", ms=2.5, color=color, label=label)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("stage loss")
    ax.set_title("stage losses")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = out_dir / "losses.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    evals = [r for r in rows if r.val_acc_target is not None]
    if evals:
        outer = [r.outer_iter for r in evals]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        ax1.plot(outer, [r.val_acc_online for r in evals], label="online", color="tab:gray")
        ax1.plot(outer, [r.val_acc_target for r in evals], label="target", color="tab:red")
        ax1.set_xlabel("outer iteration")
        ax1.set_ylabel("validation accuracy")
        ax1.set_title("validation accuracy")
        ax1.legend(fontsize=8)
        aligned = [(r.outer_iter, r.align_symkl) for r in evals if r.align_symkl is not None]
        if aligned:
            xs, ys = zip(*aligned)
            ax2.plot(xs, ys, color="tab:purple")
            ax2.set_yscale("log")
        ax2.set_xlabel("outer iteration")
        ax2.set_ylabel("symmetric KL")
        ax2.set_title("posterior alignment diagnostic")
        fig.tight_layout()
        path = out_dir / "validation.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def render_benchmark_figures(result, out_dir: Path | str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = sorted({r.method for r in result.rows})

    fig, ax = plt.subplots(figsize=(6, 4))
    for mi, method in enumerate(methods):
        rs = [r for r in result.rows if r.method == method]
        xs = np.full(len(rs), mi, dtype=float)
        ax.plot(xs + 0.04 * np.arange(len(rs)) - 0.02 * len(rs), [r.acc_target for r in rs], "o", alpha=0.7)
        mean = result.aggregates[method]["mean_acc_target"]
        ax.hlines(mean, mi - 0.25, mi + 0.25, color="black")
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods)
    ax.set_ylabel("held-out accuracy (target model)")
    ax.set_title(f"{result.scenario}: held-out accuracy per seed")
    fig.tight_layout()
    acc_path = out_dir / "benchmark_accuracy.png"
    fig.savefig(acc_path, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for mi, method in enumerate(methods):
        ratios = [r.align_ratio for r in result.rows if r.method == method and r.align_ratio is not None]
        if ratios:
            ax.plot(np.full(len(ratios), mi, dtype=float), ratios, "o", alpha=0.7)
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods)
    ax.set_ylabel("final / reference alignment diagnostic")
    ax.set_title("posterior alignment reduction")
    fig.tight_layout()
    align_path = out_dir / "benchmark_alignment.png"
    fig.savefig(align_path, dpi=120)
    plt.close(fig)
    return [acc_path, align_path]
