"""Finite-difference verification of the full loss suite.

Each loss is checked against central differences on a batch of randomly drawn
toy problems (N in {2,3}, feature dim in {2,5}, K in {2,4}, batch in {3,8}).
A loss is checked only against the parameters it is defined to train: the
domain-head refit loss against the heads, the cross-domain loss against the
extractor and global head, everything else against all of its inputs.

Toy problems whose ReLU pre-activations come within 1e-4 of the kink are
redrawn, since central differences are meaningless across the
non-differentiable point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import GradientCheckReport, Node, gradient_check
from .losses import DomainBatch, domain_features, loss_cdl, loss_ce, loss_cemm, loss_cov, loss_dsc, loss_mean, loss_mm
from .model import CmclModel
from .rng import TAG_TOY, substream

__all__ = ["LossCheckResult", "run_gradcheck_suite", "LOSS_NAMES"]

LOSS_NAMES = ("loss_mean", "loss_cov", "loss_mm", "loss_ce", "loss_dsc", "loss_cdl", "loss_cemm")

_KINK_MARGIN = 1e-4


@dataclass
class LossCheckResult:
    name: str
    passed: bool
    max_rel_error: float
    configs: int
    worst_report: GradientCheckReport

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<10} max_rel_error={self.max_rel_error:.3e}  {status}"


def _min_kink_distance(model: CmclModel, batches: list[DomainBatch]) -> float:
    """Smallest |pre-activation| over every ReLU input in the toy forward pass."""
    worst = np.inf
    layers = model.extractor.layers
    for batch in batches:
        h = batch.x
        for i, layer in enumerate(layers):
            pre = layer.forward_array(h)
            rectified = i + 1 < len(layers) or model.extractor.final_relu
            if rectified:
                worst = min(worst, float(np.abs(pre).min()))
                h = np.maximum(pre, 0.0)
            else:
                h = pre
    return worst


def _toy_problem(rng: np.random.Generator) -> tuple[CmclModel, list[DomainBatch]]:
    for _ in range(100):
        n = int(rng.choice([2, 3]))
        d = int(rng.choice([2, 5]))
        k = int(rng.choice([2, 4]))
        b = int(rng.choice([3, 8]))
        input_dim, hidden = 3, (4,)
        model = CmclModel.create(input_dim, hidden, d, k, n, rng)
        for clf in [*model.domain_classifiers, model.global_classifier]:
            clf.W.value = 0.5 * rng.normal(size=clf.W.value.shape)
        batches = [
            DomainBatch(i, rng.normal(size=(b, input_dim)), rng.integers(0, k, size=b))
            for i in range(n)
        ]
        if _min_kink_distance(model, batches) > _KINK_MARGIN:
            return model, batches
    raise RuntimeError("could not draw a toy problem clear of ReLU kinks")


def _loss_builder(name: str, model: CmclModel, batches: list[DomainBatch]):
    if name == "loss_mean":
        return (lambda: loss_mean(domain_features(model, batches))), model.extractor.named_parameters()
    if name == "loss_cov":
        return (lambda: loss_cov(domain_features(model, batches))), model.extractor.named_parameters()
    if name == "loss_mm":
        return (
            lambda: loss_mm(domain_features(model, batches), 1.0, 1.0),
            model.extractor.named_parameters(),
        )
    if name == "loss_ce":
        return (lambda: loss_ce(model, batches)), model.named_parameters()
    if name == "loss_dsc":
        return (lambda: loss_dsc(model, batches)), model.domain_parameters()
    if name == "loss_cdl":
        return (lambda: loss_cdl(model, batches)), model.extractor_and_global_parameters()
    if name == "loss_cemm":
        return (
            lambda: loss_cemm(model, batches, 0.7, 0.3)[0],
            model.named_parameters(),
        )
    raise ValueError(f"unknown loss {name!r}")


def run_gradcheck_suite(
    configs_per_loss: int = 20,
    h: float = 1e-6,
    tol: float = 1e-5,
    seed: int = 0,
) -> list[LossCheckResult]:
    results = []
    for li, name in enumerate(LOSS_NAMES):
        worst_report: GradientCheckReport | None = None
        for ci in range(configs_per_loss):
            rng = substream(seed, TAG_TOY, li * 1000 + ci)
            model, batches = _toy_problem(rng)
            f, params = _loss_builder(name, model, batches)
            named: list[Node] = []
            for pname, node in params.items():
                node.name = pname
                named.append(node)
            report = gradient_check(f, named, h=h, tol=tol)
            if worst_report is None or report.max_rel_error > worst_report.max_rel_error:
                worst_report = report
        assert worst_report is not None
        results.append(
            LossCheckResult(
                name=name,
                passed=worst_report.passed,
                max_rel_error=worst_report.max_rel_error,
                configs=configs_per_loss,
                worst_report=worst_report,
            )
        )
    return results
