"""Training losses and alignment diagnostics.

All losses are pure functions of the model and the current mini-batches and
return scalar graph nodes. Conventions:

* ``loss_ce`` averages over the pooled example count and sends every example
  through all N domain heads plus the global head;
* ``loss_dsc`` and ``loss_cdl`` normalize per domain batch and sum over
  domains;
* pairwise moment penalties run over unordered domain pairs i < j with the
  ``2 / (N (N-1) d)`` (means) and ``2 / (N (N-1) d^2)`` (covariances)
  prefactors;
* moments are those of the current mini-batch, not running estimates.

Freezing is structural: ``loss_dsc`` consumes detached features, so extractor
parameters are simply absent from its graph, and ``loss_cdl`` consumes
detached domain-head weights. "Frozen" gradients are therefore exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Node
from .errors import ContractError, DivergenceError, ShapeError
from .model import CmclModel

__all__ = [
    "DomainBatch",
    "domain_features",
    "loss_ce",
    "loss_mean",
    "loss_cov",
    "loss_mm",
    "loss_cemm",
    "loss_dsc",
    "loss_cdl",
    "kl_categorical",
    "kl_decomposition_check",
    "posterior_alignment_diag",
]


@dataclass
class DomainBatch:
    """A labelled mini-batch drawn from one source domain."""

    domain_index: int
    x: Array
    y: Array

    def __post_init__(self):
        self.x = ad.as_array(self.x)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ShapeError(f"DomainBatch: x {self.x.shape} and y {self.y.shape} do not align")
        if self.x.shape[0] < 1:
            raise ContractError("DomainBatch: empty batch")
        if self.y.min(initial=0) < 0:
            raise ContractError("DomainBatch: negative label")

    def __len__(self) -> int:
        return self.x.shape[0]


def _check_batches(model: CmclModel, batches: Sequence[DomainBatch]) -> None:
    if not batches:
        raise ContractError("expected one batch per domain, got none")
    if len(batches) != model.num_domains:
        raise ContractError(
            f"expected one batch per domain ({model.num_domains}), got {len(batches)}"
        )
    for i, b in enumerate(batches):
        if b.domain_index != i:
            raise ContractError(f"batch {i} carries domain_index {b.domain_index}")
        if b.y.max() >= model.class_count:
            raise ContractError(
                f"batch {i}: label {b.y.max()} out of range for K={model.class_count}"
            )


def domain_features(model: CmclModel, batches: Sequence[DomainBatch]) -> list[Node]:
    """One feature node per domain batch, through the live extractor."""
    return [model.extractor.forward(b.x) for b in batches]


def loss_ce(
    model: CmclModel,
    batches: Sequence[DomainBatch],
    features: Sequence[Node] | None = None,
) -> Node:
    """Joint cross-entropy: every pooled example scored by all heads.

    -(1/|D|) sum_{(x,y)} [ sum_i log P_i(y|F(x)) + log P_g(y|F(x)) ] where |D|
    counts examples across all batches."""
    _check_batches(model, batches)
    feats = list(features) if features is not None else domain_features(model, batches)
    heads = list(model.domain_classifiers) + [model.global_classifier]
    terms = []
    total = 0
    for batch, z in zip(batches, feats):
        total += len(batch)
        for head in heads:
            lp = head.log_posterior(z)
            terms.append(ad.sum_all(ad.select_labels(lp, batch.y)))
    return ad.scale(ad.add_n(terms), -1.0 / total)


def loss_mean(features: Sequence[Node]) -> Node:
    """Pairwise squared distance of per-domain batch means, scaled by 2/(N(N-1)d)."""
    feats = [ad.as_node(f) for f in features]
    n = len(feats)
    if n < 2:
        raise ContractError(f"loss_mean: need at least 2 domains, got {n}")
    d = feats[0].value.shape[1]
    means = [ad.batch_mean(f) for f in feats]
    terms = [
        ad.sq_frobenius_dist(means[i], means[j]) for i in range(n) for j in range(i + 1, n)
    ]
    return ad.scale(ad.add_n(terms), 2.0 / (n * (n - 1) * d))


def loss_cov(features: Sequence[Node]) -> Node:
    """Pairwise squared Frobenius distance of per-domain batch covariances,
    scaled by 2/(N(N-1)d^2)."""
    feats = [ad.as_node(f) for f in features]
    n = len(feats)
    if n < 2:
        raise ContractError(f"loss_cov: need at least 2 domains, got {n}")
    d = feats[0].value.shape[1]
    covs = [ad.batch_covariance(f) for f in feats]
    terms = [
        ad.sq_frobenius_dist(covs[i], covs[j]) for i in range(n) for j in range(i + 1, n)
    ]
    return ad.scale(ad.add_n(terms), 2.0 / (n * (n - 1) * d * d))


def loss_mm(features: Sequence[Node], lambda_mean: float, lambda_cov: float) -> Node:
    return ad.add(
        ad.scale(loss_mean(features), lambda_mean),
        ad.scale(loss_cov(features), lambda_cov),
    )


def loss_cemm(
    model: CmclModel,
    batches: Sequence[DomainBatch],
    lambda_mean: float,
    lambda_cov: float,
) -> tuple[Node, dict[str, Node]]:
    """Stage-A objective: cross-entropy plus weighted moment matching.

    Returns the total together with its unweighted components for logging."""
    feats = domain_features(model, batches)
    parts = {
        "ce": loss_ce(model, batches, features=feats),
        "mean": loss_mean(feats),
        "cov": loss_cov(feats),
    }
    total = ad.add(
        parts["ce"],
        ad.add(ad.scale(parts["mean"], lambda_mean), ad.scale(parts["cov"], lambda_cov)),
    )
    return total, parts


def loss_dsc(model: CmclModel, batches: Sequence[DomainBatch]) -> Node:
    """Per-domain head refit on detached features.

    -sum_i (1/b_i) sum_{(x,y) in batch_i} log P_i(y|F(x)); the extractor output
    enters as a constant, so only the domain heads receive gradients."""
    _check_batches(model, batches)
    terms = []
    for batch, head in zip(batches, model.domain_classifiers):
        z = ad.constant(model.extractor.forward_array(batch.x))
        lp = head.log_posterior(z)
        terms.append(ad.scale(ad.sum_all(ad.select_labels(lp, batch.y)), -1.0 / len(batch)))
    return ad.add_n(terms)


def loss_cdl(model: CmclModel, batches: Sequence[DomainBatch]) -> Node:
    """Cross-domain likelihood: each domain's data scored by the other domains'
    frozen heads plus the live global head.

    -sum_i (1/b_i) sum_{(x,y)} [ sum_{j != i} log P_j(y|F(x)) + log P_g(y|F(x)) ];
    gradients reach the extractor and the global head only."""
    _check_batches(model, batches)
    terms = []
    for i, batch in enumerate(batches):
        z = model.extractor.forward(batch.x)
        picked = []
        for j, head in enumerate(model.domain_classifiers):
            if j == i:
                continue
            lp = head.log_posterior(z, frozen=True)
            picked.append(ad.sum_all(ad.select_labels(lp, batch.y)))
        lp_g = model.global_classifier.log_posterior(z)
        picked.append(ad.sum_all(ad.select_labels(lp_g, batch.y)))
        terms.append(ad.scale(ad.add_n(picked), -1.0 / len(batch)))
    return ad.add_n(terms)


def kl_categorical(p: Array, q: Array) -> float:
    """KL(p || q) for two categorical distributions, with 0 log 0 = 0."""
    p = ad.as_array(p)
    q = ad.as_array(q)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"kl_categorical: shapes {p.shape} and {q.shape} differ or are not vectors")
    for name, v in (("p", p), ("q", q)):
        if v.min() < 0 or abs(v.sum() - 1.0) > 1e-9:
            raise ContractError(f"kl_categorical: {name} is not a distribution")
    support = p > 0.0
    if np.any(q[support] == 0.0):
        raise DivergenceError("kl_categorical: q has zero mass where p > 0")
    ps = p[support]
    return float(np.sum(ps * (np.log(ps) - np.log(q[support]))))


def kl_decomposition_check(p: Array, q: Array) -> tuple[float, float]:
    """Split KL(p||q) into (sum p log p, -sum p log q); their sum is the KL."""
    p = ad.as_array(p)
    q = ad.as_array(q)
    kl_categorical(p, q)  # validates inputs and finiteness
    support = p > 0.0
    ps = p[support]
    neg_entropy = float(np.sum(ps * np.log(ps)))
    cross = float(-np.sum(ps * np.log(q[support])))
    return neg_entropy, cross


def posterior_alignment_diag(model: CmclModel, probe: Array) -> float:
    """Mean symmetric KL between domain-head posteriors over probe inputs.

    Averages 0.5*[KL(P_i||P_j) + KL(P_j||P_i)] over probe rows and unordered
    domain pairs. Computed in log space from the stabilized log-softmax, so
    no probability clamping is required. Diagnostic only; never trained on.
    """
    if model.num_domains < 2:
        raise ContractError("posterior_alignment_diag: need at least 2 domains")
    z = model.extractor.forward_array(ad.as_array(probe))
    log_ps = [head.log_posterior_array(z) for head in model.domain_classifiers]
    n = model.num_domains
    total = 0.0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            diff = log_ps[i] - log_ps[j]
            # symmetric KL per row: 0.5 * sum_k (p_i - p_j) (log p_i - log p_j)
            sym = 0.5 * np.sum((np.exp(log_ps[i]) - np.exp(log_ps[j])) * diff, axis=1)
            total += float(sym.mean())
            pairs += 1
    return total / pairs
