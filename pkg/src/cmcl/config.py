"""JSON run configuration: schema, overrides, presets.

A run config is a UTF-8 JSON object:

.. code-block:: json

    {
      "schema_version": 1,
      "scenario": {"kind": "spurious-feature", "n_source": 3, ...},
      "model": {"hidden_dims": [32], "feature_dim": 16, "final_relu": false},
      "train": {"outer_iters": 60, "lambda_mean": 1.0, ...},
      "eval_every": 1,
      "val_fraction": 0.1,
      "out_dir": "runs/demo",
      "seeds": [0, 1, 2]
    }

Optional fields fall back to dataclass defaults; unknown fields are rejected
so typos fail loudly. ``--override a.b.c=value`` patches the raw document
before parsing (values are parsed as JSON, falling back to a bare string).
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from .data import ScenarioSpec
from .errors import ConfigError
from .optim import OptimizerSpec
from .trainer import ModelConfig, TrainConfig

__all__ = [
    "SCHEMA_VERSION",
    "RunConfig",
    "parse_run_config",
    "load_run_config",
    "apply_overrides",
    "run_config_to_dict",
    "SCENARIO_PRESETS",
    "preset_run_config",
]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec
    model: ModelConfig
    train: TrainConfig
    out_dir: str
    seeds: tuple[int, ...]
    eval_every: int = 1
    val_fraction: float = 0.1

    def validate(self) -> None:
        self.scenario.validate()
        self.train.validate()
        if not self.seeds:
            raise ConfigError("seeds: must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: duplicate entries")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds: must be >= 0")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every: must be >= 1, got {self.eval_every}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction: {self.val_fraction} outside (0, 1)")
        if not self.out_dir:
            raise ConfigError("out_dir: must be a non-empty path")


_COERCIONS = {
    int: lambda v: v if isinstance(v, int) and not isinstance(v, bool) else None,
    float: lambda v: float(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else None,
    str: lambda v: v if isinstance(v, str) else None,
    bool: lambda v: v if isinstance(v, bool) else None,
}


def _build_dataclass(cls, doc: Mapping[str, Any], path: str):
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    kwargs: dict[str, Any] = {}
    for name, f in fields.items():
        fpath = f"{path}.{name}"
        if name not in doc:
            if (
                f.default is dataclasses.MISSING
                and f.default_factory is dataclasses.MISSING  # type: ignore[misc]
            ):
                raise ConfigError(f"{fpath}: missing required field")
            continue
        kwargs[name] = _coerce_field(f, doc[name], fpath)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _coerce_field(f: dataclasses.Field, value: Any, path: str) -> Any:
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if f.name in ("hidden_dims", "seeds"):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(f"{path}: expected a list of integers")
        return tuple(value)
    if f.name == "domain_params":
        if not isinstance(value, list) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
        ):
            raise ConfigError(f"{path}: expected a list of numbers")
        return tuple(float(v) for v in value)
    if f.name == "seed" and value is None:
        return None
    if "int" in t:
        out = _COERCIONS[int](value)
        if out is None:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return out
    if "float" in t:
        out = _COERCIONS[float](value)
        if out is None:
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return out
    if "bool" in t:
        out = _COERCIONS[bool](value)
        if out is None:
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return out
    if "str" in t:
        out = _COERCIONS[str](value)
        if out is None:
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return out
    return value


def parse_run_config(doc: Mapping[str, Any]) -> RunConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config: expected a JSON object at top level")
    known = {"schema_version", "scenario", "model", "train", "eval_every", "val_fraction", "out_dir", "seeds"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
    version = doc.get("schema_version")
    if version is None:
        raise ConfigError("schema_version: missing required field")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version!r}")
    for required in ("scenario", "model", "train", "out_dir", "seeds"):
        if required not in doc:
            raise ConfigError(f"{required}: missing required field")

    scenario = _build_dataclass(ScenarioSpec, doc["scenario"], "scenario")
    model = _build_dataclass(ModelConfig, doc["model"], "model")

    train_doc = dict(doc["train"])
    if "seed" in train_doc:
        raise ConfigError("train.seed: set per run via the seeds list, not in train")
    for opt_key in ("extractor_optimizer", "classifier_optimizer"):
        if opt_key in train_doc:
            train_doc[opt_key] = _build_dataclass(
                OptimizerSpec, train_doc[opt_key], f"train.{opt_key}"
            )
    train_doc["model"] = model
    train = _build_dataclass(TrainConfig, train_doc, "train")

    out_dir = doc["out_dir"]
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir: expected a string")
    seeds = doc["seeds"]
    if not isinstance(seeds, list) or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a list of integers")

    cfg = RunConfig(
        scenario=scenario,
        model=model,
        train=train,
        out_dir=out_dir,
        seeds=tuple(seeds),
        eval_every=_coerce_scalar_int(doc.get("eval_every", 1), "eval_every"),
        val_fraction=_coerce_scalar_float(doc.get("val_fraction", 0.1), "val_fraction"),
    )
    cfg.validate()
    return cfg


def _coerce_scalar_int(v: Any, path: str) -> int:
    out = _COERCIONS[int](v)
    if out is None:
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    return out


def _coerce_scalar_float(v: Any, path: str) -> float:
    out = _COERCIONS[float](v)
    if out is None:
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    return out


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        target = doc
        for part in parts[:-1]:
            nxt = target.get(part)
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: no section {part!r} in config")
            target = nxt
        target[parts[-1]] = value
    return doc


def load_run_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"config {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if overrides:
        if not isinstance(doc, dict):
            raise ConfigError("config: expected a JSON object at top level")
        doc = apply_overrides(doc, overrides)
    return parse_run_config(doc)


def run_config_to_dict(cfg: RunConfig) -> dict:
    """Inverse of :func:`parse_run_config`, for echoing configs to disk."""
    scenario = dataclasses.asdict(cfg.scenario)
    scenario["domain_params"] = list(cfg.scenario.domain_params)
    train = dataclasses.asdict(cfg.train)
    train.pop("model")
    train.pop("seed")
    model = dataclasses.asdict(cfg.model)
    model["hidden_dims"] = list(cfg.model.hidden_dims)
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "model": model,
        "train": train,
        "eval_every": cfg.eval_every,
        "val_fraction": cfg.val_fraction,
        "out_dir": cfg.out_dir,
        "seeds": list(cfg.seeds),
    }


# Desk-scale presets. "spurious-bench" is the reference benchmark: three
# sources with spurious-feature correlations 0.9/0.7/0.5, an unseen domain at
# -0.9, 2000 samples per domain, a 16-d feature map. Deviations from the
# TrainConfig defaults are deliberate desk-scale choices: the EMA step is
# raised to 0.05 because at a few hundred target updates the reference 0.001
# leaves the target model at its initialization; the covariance penalty is
# large because the loss rescales by d^2 and acts through fourth powers of the
# (small) channel weights; AdamW drives the extractor because the penalty
# gradient spans orders of magnitude; the extractor is a single linear layer
# so covariance differences cannot be hidden nonlinearly at this scale.
SCENARIO_PRESETS: dict[str, dict] = {
    "spurious-bench": {
        "schema_version": 1,
        "scenario": {
            "kind": "spurious-feature",
            "name": "spurious-bench",
            "n_source": 3,
            "class_count": 2,
            "samples_per_domain": 2000,
            "input_dim": 6,
            "domain_params": [0.9, 0.7, 0.5],
            "unseen_param": -0.9,
            "hull": "extrapolated",
            "noise_scale": 1.0,
        },
        "model": {"hidden_dims": [], "feature_dim": 16, "final_relu": False},
        "train": {
            "outer_iters": 200,
            "stage_a_iters": 1,
            "stage_b_iters": 8,
            "stage_c_iters": 6,
            "lambda_mean": 1.0,
            "lambda_cov": 1000.0,
            "ema_alpha": 0.05,
            "batch_size": 64,
            "extractor_optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 5e-4},
            "classifier_optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 5e-4},
        },
        "eval_every": 1,
        "val_fraction": 0.1,
        "out_dir": "runs/spurious-bench",
        "seeds": [0, 1, 2, 3, 4],
    },
    "rotated-smoke": {
        "schema_version": 1,
        "scenario": {
            "kind": "rotated-gaussians",
            "name": "rotated-smoke",
            "n_source": 3,
            "class_count": 3,
            "samples_per_domain": 600,
            "input_dim": 4,
            "domain_params": [-30.0, 0.0, 30.0],
            "unseen_param": 15.0,
            "hull": "interpolated",
            "noise_scale": 0.4,
        },
        "model": {"hidden_dims": [16], "feature_dim": 8, "final_relu": False},
        "train": {
            "outer_iters": 30,
            "stage_a_iters": 1,
            "stage_b_iters": 8,
            "stage_c_iters": 6,
            "lambda_mean": 1.0,
            "lambda_cov": 1.0,
            "ema_alpha": 0.05,
            "batch_size": 64,
            "extractor_optimizer": {"kind": "adamw", "lr": 0.005, "weight_decay": 5e-4},
            "classifier_optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 5e-4},
        },
        "eval_every": 1,
        "val_fraction": 0.1,
        "out_dir": "runs/rotated-smoke",
        "seeds": [0, 1, 2],
    },
}


def preset_run_config(name: str, overrides: Sequence[str] = ()) -> RunConfig:
    if name not in SCENARIO_PRESETS:
        raise ConfigError(
            f"scenario: unknown preset {name!r}; available: {sorted(SCENARIO_PRESETS)}"
        )
    doc = copy.deepcopy(SCENARIO_PRESETS[name])
    if overrides:
        doc = apply_overrides(doc, overrides)
    return parse_run_config(doc)
