"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are numpy ``float64`` arrays (shape ``()`` for scalars, ``(n,)`` for
vectors, ``(m, n)`` for matrices; no broadcasting beyond the ops defined here).
Each operation returns a :class:`Node` that records its inputs and a
vector-Jacobian product, so :func:`backward` can propagate gradients from a
scalar loss to every parameter leaf.

The graph is a write-once tape: interior nodes are built fresh for every loss
evaluation, while parameter leaves persist across evaluations. Operations
capture their input *arrays* at build time, so rebinding ``node.value``
afterwards (as the optimizers do) cannot corrupt a backward pass. A single
evaluation/backward pair is confined to one thread; leaves may be shared
across threads as long as only one thread mutates them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, InsufficientSamplesError, ProbeError, ShapeError

Array = np.ndarray

__all__ = [
    "Array",
    "Node",
    "parameter",
    "constant",
    "as_node",
    "add",
    "add_n",
    "scale",
    "sum_all",
    "transpose",
    "add_rowvec",
    "matmul",
    "relu",
    "log_softmax",
    "batch_mean",
    "batch_covariance",
    "sq_frobenius_dist",
    "select_labels",
    "backward",
    "GradientCheckReport",
    "gradient_check",
]


def as_array(x) -> Array:
    arr = np.asarray(x, dtype=np.float64)
    # ascontiguousarray would promote 0-d to 1-d; scalars must stay 0-d
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Node:
    """One value in a differentiable computation."""

    __slots__ = ("value", "parents", "requires_grad", "name", "_vjp")

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        vjp: Callable[[Array], tuple] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 else as_array(value)
        self.parents = parents
        self._vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.requires_grad and self._vjp is None else "node")
        return f"Node({tag}, shape={self.value.shape})"


def parameter(value, name: str | None = None) -> Node:
    """A trainable leaf. The value is copied so callers keep ownership."""
    return Node(as_array(value).copy(), requires_grad=True, name=name)


def constant(value, name: str | None = None) -> Node:
    """A leaf that never receives gradients."""
    return Node(value, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _op(value: Array, parents: tuple[Node, ...], vjp: Callable[[Array], tuple]) -> Node:
    # Constant-only subgraphs carry no tape; backward never visits them.
    if any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, requires_grad=True)
    return Node(value)


def _require_matrix(x: Node, op: str) -> None:
    if x.value.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-d array, got shape {x.value.shape}")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
    av, bv = a.value, b.value

    def vjp(g: Array):
        return g, g

    return _op(av + bv, (a, b), vjp)


def add_n(terms: Iterable) -> Node:
    """Sum of same-shaped nodes; pairwise left fold."""
    nodes = [as_node(t) for t in terms]
    if not nodes:
        raise ContractError("add_n: empty term list")
    out = nodes[0]
    for t in nodes[1:]:
        out = add(out, t)
    return out


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    av = a.value

    def vjp(g: Array):
        return (c * g,)

    return _op(c * av, (a,), vjp)


def sum_all(a) -> Node:
    a = as_node(a)
    shape = a.value.shape

    def vjp(g: Array):
        return (np.full(shape, float(g)),)

    return _op(np.asarray(a.value.sum()), (a,), vjp)


def transpose(a) -> Node:
    a = as_node(a)
    _require_matrix(a, "transpose")

    def vjp(g: Array):
        return (np.ascontiguousarray(g.T),)

    return _op(np.ascontiguousarray(a.value.T), (a,), vjp)


def add_rowvec(m, v) -> Node:
    """Add a length-d vector to every row of a (b, d) matrix."""
    m, v = as_node(m), as_node(v)
    _require_matrix(m, "add_rowvec")
    if v.value.shape != (m.value.shape[1],):
        raise ShapeError(f"add_rowvec: shapes {m.value.shape} and {v.value.shape} differ")

    def vjp(g: Array):
        return g, g.sum(axis=0)

    return _op(m.value + v.value, (m, v), vjp)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _require_matrix(a, "matmul")
    _require_matrix(b, "matmul")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.value.shape} and {b.value.shape}")
    av, bv = a.value, b.value

    def vjp(g: Array):
        return g @ bv.T, av.T @ g

    return _op(av @ bv, (a, b), vjp)


def relu(x) -> Node:
    """Elementwise max(x, 0); the subgradient at exactly 0 is taken as 0."""
    x = as_node(x)
    xv = x.value

    def vjp(g: Array):
        return (g * (xv > 0.0),)

    return _op(np.maximum(xv, 0.0), (x,), vjp)


def log_softmax(logits) -> Node:
    """Row-wise log-softmax of a (b, K) matrix, stabilized by max subtraction."""
    x = as_node(logits)
    _require_matrix(x, "log_softmax")
    if x.value.shape[1] < 2:
        raise ContractError(f"log_softmax: need at least 2 columns, got shape {x.value.shape}")
    m = x.value.max(axis=1, keepdims=True)
    shifted = x.value - m
    lse = m + np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = x.value - lse

    def vjp(g: Array):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _op(out, (x,), vjp)


def batch_mean(z) -> Node:
    """Column-wise mean of a (b, d) matrix."""
    z = as_node(z)
    _require_matrix(z, "batch_mean")
    b = z.value.shape[0]
    if b < 1:
        raise InsufficientSamplesError("batch_mean: empty batch")

    def vjp(g: Array):
        return (np.tile(g / b, (b, 1)),)

    return _op(z.value.mean(axis=0), (z,), vjp)


def batch_covariance(z) -> Node:
    """Sample covariance of a (b, d) matrix with divisor b - 1."""
    z = as_node(z)
    _require_matrix(z, "batch_covariance")
    b = z.value.shape[0]
    if b < 2:
        raise InsufficientSamplesError(f"batch_covariance: need at least 2 rows, got {b}")
    centered = z.value - z.value.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (b - 1)

    def vjp(g: Array):
        # C = M^T M / (b-1) with M the centered batch; dM = M (G + G^T) / (b-1),
        # then re-center dM because M itself is mean-subtracted.
        dm = centered @ (g + g.T) / (b - 1)
        return (dm - dm.mean(axis=0, keepdims=True),)

    return _op(cov, (z,), vjp)


def sq_frobenius_dist(a, b) -> Node:
    """Sum of squared elementwise differences (scalar)."""
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"sq_frobenius_dist: shapes {a.value.shape} and {b.value.shape} differ")
    diff = a.value - b.value

    def vjp(g: Array):
        d = 2.0 * float(g) * diff
        return d, -d

    return _op(np.asarray((diff * diff).sum()), (a, b), vjp)


def select_labels(log_probs, labels) -> Node:
    """Pick entry ``labels[r]`` from each row of a (b, K) matrix; returns shape (b,)."""
    lp = as_node(log_probs)
    _require_matrix(lp, "select_labels")
    y = np.asarray(labels)
    b, k = lp.value.shape
    if y.shape != (b,):
        raise ShapeError(f"select_labels: labels shape {y.shape} does not match batch {lp.value.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"select_labels: labels out of range [0, {k})")
    rows = np.arange(b)

    def vjp(g: Array):
        out = np.zeros((b, k))
        out[rows, y] = g
        return (out,)

    return _op(lp.value[rows, y], (lp,), vjp)


def backward(loss: Node, params: Sequence[Node] | None = None) -> dict[Node, Array]:
    """Propagate gradients from a scalar ``loss`` back to leaves.

    Returns a map from node to gradient array. When ``params`` is given, the
    result has exactly one entry per requested node, with zeros for nodes the
    loss does not reach; otherwise it covers every reachable parameter leaf.
    The call is pure: repeating it without re-evaluating the graph yields
    identical gradients.
    """
    if loss.value.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.value.shape}")

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones(())}
    by_id: dict[int, Node] = {id(loss): loss}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for p, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = np.array(pg)
                by_id[id(p)] = p

    if params is not None:
        return {p: grads.get(id(p), np.zeros_like(p.value)) for p in params}
    return {
        by_id[i]: g
        for i, g in grads.items()
        if by_id[i]._vjp is None and by_id[i].requires_grad
    }


@dataclass
class GradientCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    step: float
    worst_param: str
    worst_index: tuple[int, ...]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:.1e}, "
            f"worst at {self.worst_param}{list(self.worst_index)})"
        )


def gradient_check(
    f: Callable[[], Node],
    params: Sequence[Node],
    h: float = 1e-6,
    tol: float = 1e-5,
) -> GradientCheckReport:
    """Compare propagated gradients with central finite differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``; it is
    re-invoked with each coordinate perturbed by ``±h``. The relative error for
    a coordinate is ``|g - fd| / max(1, |g|, |fd|)``.
    """
    params = list(params)
    analytic = backward(f(), params)
    worst = 0.0
    worst_param = ""
    worst_index: tuple[int, ...] = ()
    for pi, p in enumerate(params):
        g = analytic[p]
        base = p.value
        pname = p.name or f"param{pi}"
        try:
            for idx in np.ndindex(base.shape or (1,)):
                key = idx if base.shape else ()
                for sign in (+1.0, -1.0):
                    probe = base.copy()
                    probe[key] += sign * h
                    p.value = probe
                    val = float(f().value)
                    if not np.isfinite(val):
                        raise ProbeError(
                            f"non-finite value at {pname}{list(key)} probing {sign:+g}*h"
                        )
                    if sign > 0:
                        fplus = val
                    else:
                        fminus = val
                fd = (fplus - fminus) / (2.0 * h)
                gi = float(g[key])
                rel = abs(gi - fd) / max(1.0, abs(gi), abs(fd))
                if rel > worst:
                    worst, worst_param, worst_index = rel, pname, key
        finally:
            p.value = base
    return GradientCheckReport(
        passed=worst <= tol,
        max_rel_error=worst,
        tol=tol,
        step=h,
        worst_param=worst_param,
        worst_index=worst_index,
    )
