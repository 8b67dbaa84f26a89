"""Synthetic multi-domain datasets with controllable shift geometry.

Two generator families:

* ``rotated-gaussians`` — K class prototypes on a circle in the plane,
  embedded into ``input_dim`` with Gaussian noise; each domain rotates the
  signal plane by its own angle (degrees). Domain shift lives in the marginal.
* ``spurious-feature`` — binary task where column 0 is a core feature that
  predicts the label identically everywhere, and column 1 is a gated label
  copy: with probability ``rho**2`` it equals ``sign(rho) * (2y - 1)`` and
  otherwise it is 0, giving ``corr(spurious, label) = rho`` exactly. ``rho``
  varies per domain, so the gate rate shifts both the posterior and the
  channel's marginal variance.

The held-out domain's generating parameter sits strictly inside the source
interval for ``interpolated`` scenarios and strictly outside it for
``extrapolated`` ones — a generator-parameter proxy for hull membership of the
actual distributions, which is not directly checkable. ``unconstrained``
disables the check for diagnostic scenarios.

Everything is a pure function of (spec, seed): each domain draws from its own
Philox substream, so generation order cannot leak randomness across domains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .autodiff import Array, as_array
from .errors import ConfigError, FormatError, InsufficientSamplesError, VersionError
from .losses import DomainBatch
from .rng import TAG_BATCH, TAG_DATA, TAG_SPLIT, substream

__all__ = [
    "DomainDataset",
    "ScenarioSpec",
    "KIND_ROTATED",
    "KIND_SPURIOUS",
    "rotate2d",
    "class_prototypes",
    "gen_rotated_gaussians",
    "gen_spurious_feature",
    "generate_scenario",
    "split_train_val",
    "BatchSampler",
    "dataset_write",
    "dataset_read",
    "DATASET_MAGIC",
    "DATASET_VERSION",
]

KIND_ROTATED = "rotated-gaussians"
KIND_SPURIOUS = "spurious-feature"

PROTOTYPE_RADIUS = 2.0
CORE_GAIN = 1.5
SPURIOUS_GAIN = 1.0


@dataclass
class DomainDataset:
    """Labelled examples drawn from a single domain."""

    name: str
    x: Array
    y: Array
    class_count: int

    def __post_init__(self):
        self.x = as_array(self.x)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ConfigError(f"{self.name}: x {self.x.shape} and y {self.y.shape} do not align")
        if self.y.size == 0:
            raise ConfigError(f"{self.name}: empty dataset")
        if self.y.min() < 0 or self.y.max() >= self.class_count:
            raise ConfigError(f"{self.name}: labels outside [0, {self.class_count})")
        present = np.unique(self.y)
        if len(present) != self.class_count:
            raise ConfigError(f"{self.name}: only {len(present)}/{self.class_count} classes present")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    n_source: int
    class_count: int
    samples_per_domain: int
    input_dim: int
    domain_params: tuple[float, ...]
    unseen_param: float
    hull: str = "interpolated"
    noise_scale: float = 0.3
    seed: int | None = None
    name: str = "scenario"

    def validate(self) -> None:
        def bad(fld: str, why: str):
            return ConfigError(f"scenario.{fld}: {why}")

        if self.kind not in (KIND_ROTATED, KIND_SPURIOUS):
            raise bad("kind", f"unknown generator {self.kind!r}")
        if self.n_source < 1:
            raise bad("n_source", "must be >= 1")
        if len(self.domain_params) != self.n_source:
            raise bad("domain_params", f"expected {self.n_source} values, got {len(self.domain_params)}")
        if self.samples_per_domain < self.class_count:
            raise bad("samples_per_domain", "must cover every class")
        if self.samples_per_domain % self.class_count != 0:
            raise bad("samples_per_domain", "must be divisible by class_count (balanced labels)")
        if self.input_dim < 2:
            raise bad("input_dim", "must be >= 2")
        if self.noise_scale < 0:
            raise bad("noise_scale", "must be >= 0")
        if self.kind == KIND_ROTATED:
            if self.class_count < 2:
                raise bad("class_count", "must be >= 2")
            if len(set(self.domain_params)) != len(self.domain_params):
                raise bad("domain_params", "rotation angles must be distinct")
        if self.kind == KIND_SPURIOUS:
            if self.class_count != 2:
                raise bad("class_count", "spurious-feature generator is binary (K=2)")
            for p in (*self.domain_params, self.unseen_param):
                if not -1.0 <= p <= 1.0:
                    raise bad("domain_params", f"correlation strength {p} outside [-1, 1]")
        lo, hi = min(self.domain_params), max(self.domain_params)
        if self.hull == "interpolated":
            if not lo < self.unseen_param < hi:
                raise bad("unseen_param", f"{self.unseen_param} is not strictly inside ({lo}, {hi})")
        elif self.hull == "extrapolated":
            if lo <= self.unseen_param <= hi:
                raise bad("unseen_param", f"{self.unseen_param} is not strictly outside [{lo}, {hi}]")
        elif self.hull != "unconstrained":
            raise bad("hull", f"unknown mode {self.hull!r}")

    def with_seed(self, seed: int) -> "ScenarioSpec":
        return self if self.seed is not None else replace(self, seed=seed)


def rotate2d(x: Array, degrees: float) -> Array:
    """Rotate the first two columns of ``x`` by ``degrees``; other columns pass through."""
    x = as_array(x)
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    out = x.copy()
    out[:, 0] = c * x[:, 0] - s * x[:, 1]
    out[:, 1] = s * x[:, 0] + c * x[:, 1]
    return out


def class_prototypes(class_count: int, radius: float = PROTOTYPE_RADIUS) -> Array:
    """K points evenly spaced on a circle of the given radius."""
    angles = 2.0 * np.pi * np.arange(class_count) / class_count
    return np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)


def _balanced_labels(m: int, k: int) -> Array:
    return np.repeat(np.arange(k, dtype=np.int64), m // k)


def _domain_rng(spec: ScenarioSpec, domain_index: int) -> np.random.Generator:
    if spec.seed is None:
        raise ConfigError("scenario.seed: must be set before generating data")
    return substream(spec.seed, TAG_DATA, domain_index)


def _rotated_domain(spec: ScenarioSpec, domain_index: int, angle: float, name: str) -> DomainDataset:
    rng = _domain_rng(spec, domain_index)
    m, k = spec.samples_per_domain, spec.class_count
    y = _balanced_labels(m, k)
    protos = class_prototypes(k)
    signal = protos[y] + spec.noise_scale * rng.normal(size=(m, 2))
    extra = spec.noise_scale * rng.normal(size=(m, spec.input_dim - 2))
    perm = rng.permutation(m)
    x = np.concatenate([rotate2d(signal, angle), extra], axis=1)
    return DomainDataset(name, x[perm], y[perm], k)


def gen_rotated_gaussians(spec: ScenarioSpec) -> list[DomainDataset]:
    """Source domains followed by the unseen domain."""
    spec.validate()
    if spec.kind != KIND_ROTATED:
        raise ConfigError(f"scenario.kind: expected {KIND_ROTATED!r}, got {spec.kind!r}")
    out = [
        _rotated_domain(spec, i, angle, f"source{i}")
        for i, angle in enumerate(spec.domain_params)
    ]
    out.append(_rotated_domain(spec, spec.n_source, spec.unseen_param, "unseen"))
    return out


def _spurious_domain(spec: ScenarioSpec, domain_index: int, rho: float, name: str) -> DomainDataset:
    rng = _domain_rng(spec, domain_index)
    m = spec.samples_per_domain
    y = _balanced_labels(m, 2)
    s = 2.0 * y - 1.0
    core = CORE_GAIN * s + spec.noise_scale * rng.normal(size=m)
    # Gated label copy: corr(spurious, label) works out to exactly rho, while
    # the gate rate rho^2 makes the channel's variance domain-specific.
    gate = rng.uniform(size=m) < rho * rho
    spurious = SPURIOUS_GAIN * np.sign(rho) * s * np.where(gate, 1.0, 0.0)
    extra = spec.noise_scale * rng.normal(size=(m, spec.input_dim - 2))
    perm = rng.permutation(m)
    x = np.concatenate([core[:, None], spurious[:, None], extra], axis=1)
    return DomainDataset(name, x[perm], y[perm], 2)


def gen_spurious_feature(spec: ScenarioSpec) -> list[DomainDataset]:
    """Source domains followed by the unseen domain."""
    spec.validate()
    if spec.kind != KIND_SPURIOUS:
        raise ConfigError(f"scenario.kind: expected {KIND_SPURIOUS!r}, got {spec.kind!r}")
    out = [
        _spurious_domain(spec, i, rho, f"source{i}")
        for i, rho in enumerate(spec.domain_params)
    ]
    out.append(_spurious_domain(spec, spec.n_source, spec.unseen_param, "unseen"))
    return out


def generate_scenario(spec: ScenarioSpec) -> list[DomainDataset]:
    if spec.kind == KIND_ROTATED:
        return gen_rotated_gaussians(spec)
    if spec.kind == KIND_SPURIOUS:
        return gen_spurious_feature(spec)
    raise ConfigError(f"scenario.kind: unknown generator {spec.kind!r}")


def split_train_val(
    ds: DomainDataset, val_fraction: float, seed: int
) -> tuple[DomainDataset, DomainDataset]:
    """Disjoint, exhaustive, class-stratified split; deterministic in ``seed``."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction: {val_fraction} outside (0, 1)")
    train_idx: list[Array] = []
    val_idx: list[Array] = []
    for cls in range(ds.class_count):
        members = np.flatnonzero(ds.y == cls)
        if len(members) < 2:
            raise InsufficientSamplesError(
                f"{ds.name}: class {cls} has {len(members)} example(s); cannot stratify"
            )
        rng = substream(seed, TAG_SPLIT, cls)
        perm = members[rng.permutation(len(members))]
        n_val = int(np.clip(round(val_fraction * len(members)), 1, len(members) - 1))
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    return (
        DomainDataset(f"{ds.name}-train", ds.x[tr], ds.y[tr], ds.class_count),
        DomainDataset(f"{ds.name}-val", ds.x[va], ds.y[va], ds.class_count),
    )


class _Cycler:
    """Without-replacement index stream that reshuffles per epoch."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.cursor = 0

    def take(self, n: int) -> Array:
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            available = self.size - self.cursor
            grab = min(available, n - filled)
            out[filled : filled + grab] = self.order[self.cursor : self.cursor + grab]
            self.cursor += grab
            filled += grab
            if self.cursor == self.size:
                self.order = self.rng.permutation(self.size)
                self.cursor = 0
        return out


class BatchSampler:
    """One batch of exactly ``batch_size`` per domain per call.

    Within a domain the sampler walks a shuffled epoch without replacement
    and reshuffles when exhausted; a batch that straddles the boundary mixes
    the tail of one epoch with the head of the next. Deterministic in
    (seed, call sequence).
    """

    def __init__(self, datasets: Sequence[DomainDataset], batch_size: int, seed: int):
        if batch_size < 1:
            raise ConfigError(f"batch_size: {batch_size} must be >= 1")
        self.datasets = list(datasets)
        self.batch_size = batch_size
        self._cyclers = [
            _Cycler(len(ds), substream(seed, TAG_BATCH, i)) for i, ds in enumerate(self.datasets)
        ]

    def next_batches(self) -> list[DomainBatch]:
        out = []
        for i, (ds, cyc) in enumerate(zip(self.datasets, self._cyclers)):
            idx = cyc.take(self.batch_size)
            out.append(DomainBatch(i, ds.x[idx], ds.y[idx]))
        return out


# --- dataset file format ------------------------------------------------------
#
# magic "CMDS" | u32 version | u16 name length | name utf-8
# | u32 M | u32 input_dim | u32 K | i32 labels[M] | f64 x[M * input_dim] row-major
# All fields little-endian.

DATASET_MAGIC = b"CMDS"
DATASET_VERSION = 1


def dataset_write(ds: DomainDataset, path) -> None:
    encoded = ds.name.encode("utf-8")
    m, dim = ds.x.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<III", m, dim, ds.class_count))
        fh.write(ds.y.astype("<i4").tobytes(order="C"))
        fh.write(ds.x.astype("<f8").tobytes(order="C"))


def dataset_read(path) -> DomainDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int, why: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"dataset: truncated reading {why} at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != DATASET_MAGIC:
        raise FormatError("dataset: bad magic at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != DATASET_VERSION:
        raise VersionError(f"dataset: unsupported version {version} at byte 4")
    (name_len,) = struct.unpack("<H", take(2, "name length"))
    name = take(name_len, "name").decode("utf-8")
    m, dim, k = struct.unpack("<III", take(12, "dimensions"))
    y = np.frombuffer(take(4 * m, "labels"), dtype="<i4").astype(np.int64)
    x = np.frombuffer(take(8 * m * dim, "features"), dtype="<f8").astype(np.float64).reshape(m, dim)
    if pos != len(data):
        raise FormatError(f"dataset: trailing data at byte {pos}")
    return DomainDataset(name, x, y, k)
