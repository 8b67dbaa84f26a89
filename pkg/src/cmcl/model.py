"""Model family: feature extractor, per-domain softmax heads, global head, EMA target.

Design notes that tests rely on:

* classifiers are bias-free linear maps ``z -> z @ W.T`` with ``W`` of shape
  ``(class_count, feature_dim)``;
* extractor layers are affine with biases, each followed by ReLU except
  (optionally) the last;
* classifier weights start at zero so initial posteriors are uniform;
  extractor weights draw from a centered uniform scaled by ``1/sqrt(fan_in)``;
* the EMA target copies only the extractor and the global head.
"""

from __future__ import annotations

import struct
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Node
from .errors import ContractError, FormatError, ShapeError, VersionError

__all__ = [
    "AffineLayer",
    "FeatureExtractor",
    "SoftmaxClassifier",
    "CmclModel",
    "EmaState",
    "extract_features",
    "posterior",
    "average_classifiers",
    "ema_update",
    "top1_accuracy",
    "checkpoint_save",
    "checkpoint_load",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]


class AffineLayer:
    """y = x @ weight.T + bias, with weight (d_out, d_in) and bias (d_out,)."""

    def __init__(self, weight: Array, bias: Array, name: str = "layer"):
        weight = ad.as_array(weight)
        bias = ad.as_array(bias)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(
                f"{name}: weight {weight.shape} and bias {bias.shape} do not form an affine map"
            )
        self.weight = ad.parameter(weight, name=f"{name}.weight")
        self.bias = ad.parameter(bias, name=f"{name}.bias")

    @property
    def in_dim(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.value.shape[0]

    def forward(self, x: Node) -> Node:
        return ad.add_rowvec(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def forward_array(self, x: Array) -> Array:
        return x @ self.weight.value.T + self.bias.value


class FeatureExtractor:
    """Stack of affine layers with ReLU between them.

    An empty layer list is the identity map (``feature_dim == input_dim``).
    ``final_relu`` controls whether the last layer's output is also rectified.
    """

    def __init__(
        self,
        layers: Sequence[tuple[Array, Array]],
        input_dim: int | None = None,
        final_relu: bool = False,
        name: str = "extractor",
    ):
        self.layers: list[AffineLayer] = []
        self.final_relu = bool(final_relu)
        self._name = name
        prev: int | None = None
        for i, (w, b) in enumerate(layers):
            layer = AffineLayer(w, b, name=f"{name}.layer{i}")
            if prev is not None and layer.in_dim != prev:
                raise ShapeError(
                    f"{name}.layer{i}: input width {layer.in_dim} does not chain from {prev}"
                )
            prev = layer.out_dim
            self.layers.append(layer)
        if self.layers:
            self._input_dim = self.layers[0].in_dim
        else:
            if input_dim is None:
                raise ContractError(f"{name}: identity extractor needs an explicit input_dim")
            self._input_dim = int(input_dim)

    @classmethod
    def init_random(
        cls,
        input_dim: int,
        hidden_dims: Sequence[int],
        feature_dim: int,
        rng: np.random.Generator,
        final_relu: bool = False,
    ) -> "FeatureExtractor":
        dims = [int(input_dim), *(int(h) for h in hidden_dims), int(feature_dim)]
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_out, d_in))
            layers.append((w, np.zeros(d_out)))
        return cls(layers, input_dim=input_dim, final_relu=final_relu)

    @property
    def input_dim(self) -> int:
        return self._input_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self._input_dim

    def _check_width(self, x_shape: tuple[int, ...]) -> None:
        if len(x_shape) != 2 or x_shape[1] != self.input_dim:
            raise ShapeError(
                f"{self._name}: input shape {x_shape} does not match input_dim {self.input_dim}"
            )

    def forward(self, x) -> Node:
        x = ad.as_node(x)
        self._check_width(x.value.shape)
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if i + 1 < len(self.layers) or self.final_relu:
                h = ad.relu(h)
        return h

    def forward_array(self, x: Array) -> Array:
        x = ad.as_array(x)
        self._check_width(x.shape)
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward_array(h)
            if i + 1 < len(self.layers) or self.final_relu:
                h = np.maximum(h, 0.0)
        return h

    def named_parameters(self) -> dict[str, Node]:
        out: dict[str, Node] = {}
        for i, layer in enumerate(self.layers):
            out[f"{self._name}.layer{i}.weight"] = layer.weight
            out[f"{self._name}.layer{i}.bias"] = layer.bias
        return out

    def copy(self, name: str | None = None) -> "FeatureExtractor":
        return FeatureExtractor(
            [(l.weight.value.copy(), l.bias.value.copy()) for l in self.layers],
            input_dim=self._input_dim,
            final_relu=self.final_relu,
            name=name or self._name,
        )


class SoftmaxClassifier:
    """Bias-free softmax head over features; holds W of shape (K, d)."""

    def __init__(self, weight: Array, name: str = "clf"):
        weight = ad.as_array(weight)
        if weight.ndim != 2 or weight.shape[0] < 2:
            raise ShapeError(f"{name}: classifier weight must be (K>=2, d), got {weight.shape}")
        self.W = ad.parameter(weight, name=f"{name}.W")
        self._name = name

    @classmethod
    def zeros(cls, class_count: int, feature_dim: int, name: str = "clf") -> "SoftmaxClassifier":
        return cls(np.zeros((class_count, feature_dim)), name=name)

    @property
    def class_count(self) -> int:
        return self.W.value.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.value.shape[1]

    def log_posterior(self, z, frozen: bool = False) -> Node:
        """Row-wise log P(y | z) = log_softmax(z @ W.T).

        ``frozen=True`` detaches the weights: the head contributes values but
        never gradients.
        """
        z = ad.as_node(z)
        if z.value.ndim != 2 or z.value.shape[1] != self.feature_dim:
            raise ShapeError(
                f"{self._name}: feature shape {z.value.shape} does not match W {self.W.value.shape}"
            )
        w = ad.constant(self.W.value) if frozen else self.W
        return ad.log_softmax(ad.matmul(z, ad.transpose(w)))

    def log_posterior_array(self, z: Array) -> Array:
        z = ad.as_array(z)
        if z.ndim != 2 or z.shape[1] != self.feature_dim:
            raise ShapeError(
                f"{self._name}: feature shape {z.shape} does not match W {self.W.value.shape}"
            )
        logits = z @ self.W.value.T
        m = logits.max(axis=1, keepdims=True)
        return logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))

    def copy(self, name: str | None = None) -> "SoftmaxClassifier":
        return SoftmaxClassifier(self.W.value.copy(), name=name or self._name)


class CmclModel:
    """Online model: one extractor, N domain heads, one global head."""

    def __init__(
        self,
        extractor: FeatureExtractor,
        domain_classifiers: Sequence[SoftmaxClassifier],
        global_classifier: SoftmaxClassifier,
    ):
        if len(domain_classifiers) < 1:
            raise ContractError("CmclModel: need at least one domain classifier")
        k, d = global_classifier.class_count, global_classifier.feature_dim
        for clf in domain_classifiers:
            if (clf.class_count, clf.feature_dim) != (k, d):
                raise ShapeError(
                    f"CmclModel: classifier shape {(clf.class_count, clf.feature_dim)} "
                    f"does not match global {(k, d)}"
                )
        if extractor.feature_dim != d:
            raise ShapeError(
                f"CmclModel: extractor feature_dim {extractor.feature_dim} does not match classifiers ({d})"
            )
        self.extractor = extractor
        self.domain_classifiers = list(domain_classifiers)
        self.global_classifier = global_classifier

    @classmethod
    def create(
        cls,
        input_dim: int,
        hidden_dims: Sequence[int],
        feature_dim: int,
        class_count: int,
        num_domains: int,
        rng: np.random.Generator,
        final_relu: bool = False,
    ) -> "CmclModel":
        extractor = FeatureExtractor.init_random(
            input_dim, hidden_dims, feature_dim, rng, final_relu=final_relu
        )
        heads = [
            SoftmaxClassifier.zeros(class_count, feature_dim, name=f"domain{j}")
            for j in range(num_domains)
        ]
        glob = SoftmaxClassifier.zeros(class_count, feature_dim, name="global")
        return cls(extractor, heads, glob)

    @property
    def num_domains(self) -> int:
        return len(self.domain_classifiers)

    @property
    def class_count(self) -> int:
        return self.global_classifier.class_count

    @property
    def feature_dim(self) -> int:
        return self.global_classifier.feature_dim

    @property
    def input_dim(self) -> int:
        return self.extractor.input_dim

    def named_parameters(self) -> dict[str, Node]:
        out = self.extractor.named_parameters()
        for j, clf in enumerate(self.domain_classifiers):
            out[f"domain{j}.W"] = clf.W
        out["global.W"] = self.global_classifier.W
        return out

    def extractor_and_global_parameters(self) -> dict[str, Node]:
        out = self.extractor.named_parameters()
        out["global.W"] = self.global_classifier.W
        return out

    def domain_parameters(self) -> dict[str, Node]:
        return {f"domain{j}.W": clf.W for j, clf in enumerate(self.domain_classifiers)}

    def copy(self) -> "CmclModel":
        return CmclModel(
            self.extractor.copy(),
            [c.copy() for c in self.domain_classifiers],
            self.global_classifier.copy(),
        )


class EmaState:
    """Exponential-moving-average target copy of {extractor, global head}."""

    def __init__(
        self,
        target_extractor: FeatureExtractor,
        target_global: SoftmaxClassifier,
        alpha: float,
    ):
        alpha = float(alpha)
        if not 0.0 < alpha <= 1.0:
            raise ContractError(f"EmaState: alpha must be in (0, 1], got {alpha}")
        self.extractor = target_extractor
        self.global_classifier = target_global
        self.alpha = alpha

    @classmethod
    def from_model(cls, model: CmclModel, alpha: float) -> "EmaState":
        return cls(
            model.extractor.copy(name="ema.extractor"),
            model.global_classifier.copy(name="ema.global"),
            alpha,
        )

    def named_parameters(self) -> dict[str, Node]:
        out: dict[str, Node] = {}
        for i, layer in enumerate(self.extractor.layers):
            out[f"ema.extractor.layer{i}.weight"] = layer.weight
            out[f"ema.extractor.layer{i}.bias"] = layer.bias
        out["ema.global.W"] = self.global_classifier.W
        return out

    def copy(self) -> "EmaState":
        return EmaState(
            self.extractor.copy(name="ema.extractor"),
            self.global_classifier.copy(name="ema.global"),
            self.alpha,
        )


def extract_features(model: CmclModel, x) -> Node:
    return model.extractor.forward(x)


def posterior(classifier: SoftmaxClassifier, z, frozen: bool = False) -> Node:
    return classifier.log_posterior(z, frozen=frozen)


def average_classifiers(model: CmclModel) -> SoftmaxClassifier:
    """Elementwise mean of the domain heads, accumulated in domain order.

    When every head is bit-identical the common weight is returned as-is:
    (N*w)/N double-rounds away from w for many float64 values, and averaging
    must be exactly idempotent in that case.
    """
    first = model.domain_classifiers[0].W.value
    if all(np.array_equal(clf.W.value, first) for clf in model.domain_classifiers[1:]):
        return SoftmaxClassifier(first.copy(), name="global")
    total = first.copy()
    for clf in model.domain_classifiers[1:]:
        total += clf.W.value
    return SoftmaxClassifier(total / model.num_domains, name="global")


def _ema_pairs(ema: EmaState, model: CmclModel) -> list[tuple[Node, Node]]:
    if len(ema.extractor.layers) != len(model.extractor.layers):
        raise ShapeError(
            f"ema_update: target has {len(ema.extractor.layers)} layers, online has "
            f"{len(model.extractor.layers)}"
        )
    pairs: list[tuple[Node, Node]] = []
    for t_layer, o_layer in zip(ema.extractor.layers, model.extractor.layers):
        pairs.append((t_layer.weight, o_layer.weight))
        pairs.append((t_layer.bias, o_layer.bias))
    pairs.append((ema.global_classifier.W, model.global_classifier.W))
    for t, o in pairs:
        if t.value.shape != o.value.shape:
            raise ShapeError(
                f"ema_update: target shape {t.value.shape} does not mirror online {o.value.shape}"
            )
    return pairs


def ema_update(ema: EmaState, model: CmclModel) -> EmaState:
    """theta_target += alpha * (theta_online - theta_target) for {extractor, global head}.

    alpha == 1 copies outright; t + 1*(o - t) is not bit-exact in floats."""
    for target, online in _ema_pairs(ema, model):
        if ema.alpha == 1.0:
            target.value = online.value.copy()
        else:
            target.value = target.value + ema.alpha * (online.value - target.value)
    return ema


def top1_accuracy(extractor: FeatureExtractor, classifier: SoftmaxClassifier, x: Array, y: Array) -> float:
    """Fraction of rows whose argmax score matches the label (ties -> lowest index)."""
    z = extractor.forward_array(ad.as_array(x))
    scores = z @ classifier.W.value.T
    pred = scores.argmax(axis=1)
    return float(np.mean(pred == np.asarray(y)))


# --- checkpoint format ------------------------------------------------------
#
# magic "CMCL" | u32 version | u32 array count | entries...
# entry: u16 name length | name utf-8 | u8 rank | u64 dims[rank] | f64 data
# All integers and floats little-endian. Scalars use rank 0.

CHECKPOINT_MAGIC = b"CMCL"
CHECKPOINT_VERSION = 1


def _checkpoint_arrays(model: CmclModel, ema: EmaState) -> dict[str, Array]:
    arrays: dict[str, Array] = {}
    arrays.update({k: v.value for k, v in model.named_parameters().items()})
    arrays["extractor.final_relu"] = np.asarray(1.0 if model.extractor.final_relu else 0.0)
    arrays.update({k: v.value for k, v in ema.named_parameters().items()})
    arrays["ema.alpha"] = np.asarray(ema.alpha)
    return arrays


def _pack_arrays(arrays: Mapping[str, Array]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        arr = ad.as_array(arr)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def _unpack_arrays(data: bytes, magic: bytes, what: str) -> dict[str, Array]:
    pos = 0

    def take(n: int, why: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{what}: truncated reading {why} at byte {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(len(magic), "magic") != magic:
        raise FormatError(f"{what}: bad magic at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{what}: unsupported version {version} at byte {len(magic)}")
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims")) if rank else ()
        n_items = int(np.prod(dims)) if rank else 1
        raw = take(8 * n_items, f"data for {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(data):
        raise FormatError(f"{what}: trailing data at byte {pos}")
    return arrays


def checkpoint_save(model: CmclModel, ema: EmaState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_pack_arrays(_checkpoint_arrays(model, ema)))


def _collect_layers(arrays: dict[str, Array], prefix: str, what: str) -> list[tuple[Array, Array]]:
    layers = []
    i = 0
    while f"{prefix}.layer{i}.weight" in arrays:
        w = arrays.pop(f"{prefix}.layer{i}.weight")
        key = f"{prefix}.layer{i}.bias"
        if key not in arrays:
            raise FormatError(f"{what}: missing array {key!r}")
        layers.append((w, arrays.pop(key)))
        i += 1
    return layers


def checkpoint_load(path) -> tuple[CmclModel, EmaState]:
    with open(path, "rb") as fh:
        data = fh.read()
    arrays = _unpack_arrays(data, CHECKPOINT_MAGIC, "checkpoint")

    def pop(name: str) -> Array:
        if name not in arrays:
            raise FormatError(f"checkpoint: missing array {name!r}")
        return arrays.pop(name)

    final_relu = bool(float(pop("extractor.final_relu")))
    layers = _collect_layers(arrays, "extractor", "checkpoint")
    global_w = pop("global.W")
    heads = []
    j = 0
    while f"domain{j}.W" in arrays:
        heads.append(SoftmaxClassifier(arrays.pop(f"domain{j}.W"), name=f"domain{j}"))
        j += 1
    if not heads:
        raise FormatError("checkpoint: no domain classifiers present")
    input_dim = layers[0][0].shape[1] if layers else global_w.shape[1]
    extractor = FeatureExtractor(layers, input_dim=input_dim, final_relu=final_relu)
    model = CmclModel(extractor, heads, SoftmaxClassifier(global_w, name="global"))

    alpha = float(pop("ema.alpha"))
    ema_layers = _collect_layers(arrays, "ema.extractor", "checkpoint")
    ema_global = pop("ema.global.W")
    if arrays:
        raise FormatError(f"checkpoint: unexpected arrays {sorted(arrays)}")
    ema_extractor = FeatureExtractor(
        ema_layers, input_dim=input_dim, final_relu=final_relu, name="ema.extractor"
    )
    ema = EmaState(ema_extractor, SoftmaxClassifier(ema_global, name="ema.global"), alpha)
    _ema_pairs(ema, model)
    return model, ema
