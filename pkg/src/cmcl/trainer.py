"""Three-stage alternating training loop.

Each outer iteration runs:

* Stage A (``stage_a_iters`` times): joint cross-entropy plus moment matching;
  one optimizer step on the extractor, every domain head and the global head
  with the extractor/global optimizer, then an EMA update of the target copy.
* Stage B (``stage_b_iters`` times): per-domain head refit on detached
  features with the classifier optimizer, then the global head is set to the
  elementwise mean of the domain heads. No EMA update.
* Stage C (``stage_c_iters`` times): cross-domain likelihood step on the
  extractor and the global head (domain heads frozen), then an EMA update.

A single per-domain batch stream advances across all stages, so the stages of
one outer iteration see different batches. Validation of the online and target
models (plus the posterior-alignment diagnostic) runs every ``eval_every``
outer iterations and is recorded on the last metrics row of that iteration;
the checkpoint with the best mean target validation accuracy is retained.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import BatchSampler, DomainDataset
from .errors import ConfigError, NumericError
from .losses import DomainBatch, loss_cdl, loss_cemm, loss_dsc, posterior_alignment_diag
from .model import CmclModel, EmaState, average_classifiers, ema_update, top1_accuracy
from .optim import AdamW, MomentumSgd, OptimizerSpec, make_optimizer
from .rng import TAG_INIT, substream

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "MetricsRow",
    "TrainResult",
    "METRICS_HEADER",
    "stage_a_step",
    "stage_b_step",
    "stage_c_step",
    "train",
    "format_metrics_csv",
    "write_metrics_csv",
]

STAGE_A, STAGE_B, STAGE_C = "A", "B", "C"


@dataclass(frozen=True)
class ModelConfig:
    hidden_dims: tuple[int, ...]
    feature_dim: int
    final_relu: bool = False

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError(f"model.feature_dim: must be >= 1, got {self.feature_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"model.hidden_dims: all widths must be >= 1, got {self.hidden_dims}")


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the alternating loop.

    Defaults follow the small-image reference configuration: one stage-A
    iteration, 8 stage-B and 6 stage-C iterations per outer loop, moment
    penalties (0.001, 0.01), EMA step 0.001, per-domain batches of 64,
    momentum SGD (lr 0.05, momentum 0.9, weight decay 5e-4) for the extractor
    and global head, and AdamW (lr 1e-5, weight decay 5e-4) for the domain
    heads.
    """

    model: ModelConfig
    outer_iters: int
    stage_a_iters: int = 1
    stage_b_iters: int = 8
    stage_c_iters: int = 6
    lambda_mean: float = 0.001
    lambda_cov: float = 0.01
    ema_alpha: float = 0.001
    batch_size: int = 64
    extractor_optimizer: OptimizerSpec = OptimizerSpec(
        kind="sgd", lr=0.05, momentum=0.9, weight_decay=5e-4
    )
    classifier_optimizer: OptimizerSpec = OptimizerSpec(
        kind="adamw", lr=1e-5, weight_decay=5e-4
    )
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        if self.outer_iters < 0:
            raise ConfigError(f"train.outer_iters: must be >= 0, got {self.outer_iters}")
        for fld in ("stage_a_iters", "stage_b_iters", "stage_c_iters"):
            if getattr(self, fld) < 0:
                raise ConfigError(f"train.{fld}: must be >= 0, got {getattr(self, fld)}")
        for fld in ("lambda_mean", "lambda_cov"):
            if getattr(self, fld) < 0:
                raise ConfigError(f"train.{fld}: must be >= 0, got {getattr(self, fld)}")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ConfigError(f"train.ema_alpha: must be in (0, 1], got {self.ema_alpha}")
        if self.batch_size < 2:
            raise ConfigError(
                f"train.batch_size: must be >= 2 (covariances need it), got {self.batch_size}"
            )
        if self.seed < 0:
            raise ConfigError(f"train.seed: must be >= 0, got {self.seed}")
        self.extractor_optimizer.validate("train.extractor_optimizer")
        self.classifier_optimizer.validate("train.classifier_optimizer")
        if not self.extractor_optimizer.lr > 0:
            raise ConfigError("train.extractor_optimizer.lr: must be > 0")
        if not self.classifier_optimizer.lr > 0:
            raise ConfigError("train.classifier_optimizer.lr: must be > 0")


METRICS_HEADER = (
    "outer_iter,stage,inner_iter,loss_ce,loss_mean,loss_cov,loss_dsc,loss_cdl,"
    "align_symkl,val_acc_online,val_acc_target"
)


@dataclass
class MetricsRow:
    outer_iter: int
    stage: str
    inner_iter: int
    loss_ce: float | None = None
    loss_mean: float | None = None
    loss_cov: float | None = None
    loss_dsc: float | None = None
    loss_cdl: float | None = None
    align_symkl: float | None = None
    val_acc_online: float | None = None
    val_acc_target: float | None = None
    # Optimized stage objective; not part of the CSV schema.
    loss_total: float | None = None

    def csv_cells(self) -> list[str]:
        def fmt(v) -> str:
            return "" if v is None else repr(v)

        return [
            str(self.outer_iter),
            self.stage,
            str(self.inner_iter),
            fmt(self.loss_ce),
            fmt(self.loss_mean),
            fmt(self.loss_cov),
            fmt(self.loss_dsc),
            fmt(self.loss_cdl),
            fmt(self.align_symkl),
            fmt(self.val_acc_online),
            fmt(self.val_acc_target),
        ]


def format_metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    for row in rows:
        buf.write(",".join(row.csv_cells()) + "\n")
    return buf.getvalue()


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_metrics_csv(rows))


def _check_finite(value: float, outer: int, stage: str, inner: int) -> float:
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite loss at outer_iter {outer}, stage {stage}, inner_iter {inner}"
        )
    return value


def stage_a_step(
    model: CmclModel,
    ema: EmaState,
    batches: Sequence[DomainBatch],
    cfg: TrainConfig,
    optimizer: MomentumSgd | AdamW,
) -> dict[str, float]:
    """Joint ERM + moment-matching step on all online parameters, then EMA."""
    total, parts = loss_cemm(model, batches, cfg.lambda_mean, cfg.lambda_cov)
    params = model.named_parameters()
    grads = ad.backward(total, list(params.values()))
    optimizer.step(params, {name: grads[node] for name, node in params.items()})
    ema_update(ema, model)
    return {
        "loss_total": float(total.value),
        "loss_ce": float(parts["ce"].value),
        "loss_mean": float(parts["mean"].value),
        "loss_cov": float(parts["cov"].value),
    }


def stage_b_step(
    model: CmclModel,
    batches: Sequence[DomainBatch],
    cfg: TrainConfig,
    optimizer: MomentumSgd | AdamW,
) -> dict[str, float]:
    """Refit the domain heads on frozen features, then re-average the global head."""
    total = loss_dsc(model, batches)
    params = model.domain_parameters()
    grads = ad.backward(total, list(params.values()))
    optimizer.step(params, {name: grads[node] for name, node in params.items()})
    model.global_classifier.W.value = average_classifiers(model).W.value
    return {"loss_total": float(total.value), "loss_dsc": float(total.value)}


def stage_c_step(
    model: CmclModel,
    ema: EmaState,
    batches: Sequence[DomainBatch],
    cfg: TrainConfig,
    optimizer: MomentumSgd | AdamW,
) -> dict[str, float]:
    """Cross-domain likelihood step on the extractor and global head, then EMA."""
    total = loss_cdl(model, batches)
    params = model.extractor_and_global_parameters()
    grads = ad.backward(total, list(params.values()))
    optimizer.step(params, {name: grads[node] for name, node in params.items()})
    ema_update(ema, model)
    return {"loss_total": float(total.value), "loss_cdl": float(total.value)}


@dataclass
class TrainResult:
    model: CmclModel
    ema: EmaState
    metrics: list[MetricsRow]
    best_model: CmclModel
    best_ema: EmaState
    best_outer_iter: int | None
    best_val_acc_target: float | None
    best_val_acc_online: float | None


def _mean_accuracy(extractor, classifier, datasets: Sequence[DomainDataset]) -> float:
    accs = [top1_accuracy(extractor, classifier, ds.x, ds.y) for ds in datasets]
    return float(np.mean(accs))


def _validate_datasets(datasets: Sequence[DomainDataset], what: str) -> tuple[int, int]:
    if len(datasets) < 2:
        raise ConfigError(f"{what}: need at least 2 source domains, got {len(datasets)}")
    dims = {ds.input_dim for ds in datasets}
    ks = {ds.class_count for ds in datasets}
    if len(dims) != 1 or len(ks) != 1:
        raise ConfigError(f"{what}: inconsistent shapes (input_dims {dims}, class counts {ks})")
    return dims.pop(), ks.pop()


def train(
    cfg: TrainConfig,
    train_sets: Sequence[DomainDataset],
    val_sets: Sequence[DomainDataset] | None = None,
    eval_every: int = 1,
    step_callback: Callable[[str, int, int, CmclModel, EmaState], None] | None = None,
) -> TrainResult:
    """Run the full alternating loop over ``cfg.outer_iters`` iterations.

    ``step_callback(stage, outer_iter, inner_iter, model, ema)`` fires after
    every optimizer step. With ``outer_iters == 0`` the initial model comes
    back untouched with empty metrics.
    """
    cfg.validate()
    if eval_every < 1:
        raise ConfigError(f"eval_every: must be >= 1, got {eval_every}")
    input_dim, class_count = _validate_datasets(train_sets, "train datasets")
    if val_sets is not None:
        if len(val_sets) != len(train_sets):
            raise ConfigError("val datasets: must align with train datasets")
        _validate_datasets(val_sets, "val datasets")

    model = CmclModel.create(
        input_dim,
        cfg.model.hidden_dims,
        cfg.model.feature_dim,
        class_count,
        len(train_sets),
        substream(cfg.seed, TAG_INIT),
        final_relu=cfg.model.final_relu,
    )
    ema = EmaState.from_model(model, cfg.ema_alpha)
    sampler = BatchSampler(train_sets, cfg.batch_size, cfg.seed)
    opt_main = make_optimizer(cfg.extractor_optimizer)
    opt_heads = make_optimizer(cfg.classifier_optimizer)

    probe = np.concatenate([ds.x for ds in (val_sets or train_sets)], axis=0)
    rows: list[MetricsRow] = []
    best: tuple[float, CmclModel, EmaState, int, float] | None = None

    for outer in range(1, cfg.outer_iters + 1):
        iter_rows: list[MetricsRow] = []
        for inner in range(1, cfg.stage_a_iters + 1):
            vals = stage_a_step(model, ema, sampler.next_batches(), cfg, opt_main)
            _check_finite(vals["loss_total"], outer, STAGE_A, inner)
            iter_rows.append(MetricsRow(outer, STAGE_A, inner, **_pick(vals)))
            if step_callback:
                step_callback(STAGE_A, outer, inner, model, ema)
        for inner in range(1, cfg.stage_b_iters + 1):
            vals = stage_b_step(model, sampler.next_batches(), cfg, opt_heads)
            _check_finite(vals["loss_total"], outer, STAGE_B, inner)
            iter_rows.append(MetricsRow(outer, STAGE_B, inner, **_pick(vals)))
            if step_callback:
                step_callback(STAGE_B, outer, inner, model, ema)
        for inner in range(1, cfg.stage_c_iters + 1):
            vals = stage_c_step(model, ema, sampler.next_batches(), cfg, opt_main)
            _check_finite(vals["loss_total"], outer, STAGE_C, inner)
            iter_rows.append(MetricsRow(outer, STAGE_C, inner, **_pick(vals)))
            if step_callback:
                step_callback(STAGE_C, outer, inner, model, ema)
        rows.extend(iter_rows)

        if val_sets is not None and outer % eval_every == 0 and iter_rows:
            acc_online = _mean_accuracy(model.extractor, model.global_classifier, val_sets)
            acc_target = _mean_accuracy(ema.extractor, ema.global_classifier, val_sets)
            align = posterior_alignment_diag(model, probe) if model.num_domains >= 2 else None
            last = iter_rows[-1]
            last.val_acc_online = acc_online
            last.val_acc_target = acc_target
            last.align_symkl = align
            if best is None or acc_target > best[0]:
                best = (acc_target, model.copy(), ema.copy(), outer, acc_online)

    if best is None:
        return TrainResult(model, ema, rows, model.copy(), ema.copy(), None, None, None)
    acc_target, best_model, best_ema, best_outer, acc_online = best
    return TrainResult(model, ema, rows, best_model, best_ema, best_outer, acc_target, acc_online)


def _pick(vals: dict[str, float]) -> dict[str, float]:
    keep = ("loss_ce", "loss_mean", "loss_cov", "loss_dsc", "loss_cdl", "loss_total")
    return {k: v for k, v in vals.items() if k in keep}
