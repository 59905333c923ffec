"""Declarative experiment configs.

A config is a JSON file with blocks: dataset, model, train, policy, output,
plus a top-level seed. Every cross-field constraint is validated up front
with the offending field named, before any work starts. Artifacts of a run
live under one directory keyed by the config hash.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .ingest import BUILTIN_SCHEMAS, SchemaDescriptor, load_schema
from .model import ModelConfig
from .trainer import TrainConfig
from .windowing import UNBOUNDED, WindowPolicy


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field {field!r}: {message}")


def _require(block: dict, field: str, typ, where: str, default=None, required=False):
    if field not in block:
        if required:
            raise ConfigError(f"{where}.{field}", "missing required field")
        return default
    value = block[field]
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if typ is not None and not isinstance(value, typ) or isinstance(value, bool) and typ is not bool:
        raise ConfigError(f"{where}.{field}", f"expected {typ.__name__}, got {type(value).__name__}")
    return value


def _reject_unknown(block: dict, known: set[str], where: str):
    for key in block:
        if key not in known:
            raise ConfigError(f"{where}.{key}", "unknown field")


@dataclass
class SynthParams:
    n_users: int
    vocab_size: int
    mean_len: int
    signal_period: int
    n_types: int = 3


@dataclass
class DatasetBlock:
    kind: str  # "file" | "synthetic"
    path: Optional[str] = None
    schema: Optional[str] = None
    min_count: int = 1
    synth: Optional[SynthParams] = None

    def schema_descriptor(self) -> SchemaDescriptor:
        if self.schema in BUILTIN_SCHEMAS:
            return BUILTIN_SCHEMAS[self.schema]
        return load_schema(self.schema)


class ExperimentConfig:
    """Parsed and validated experiment description."""

    def __init__(self, raw: dict, source: Optional[Path] = None):
        self.raw = raw
        self.source = source
        _reject_unknown(raw, {"dataset", "model", "train", "policy", "output", "seed", "name"},
                        "top-level")
        self.seed = _require(raw, "seed", int, "top-level", default=0)
        self.name = _require(raw, "name", str, "top-level", default="run")
        self.dataset = self._parse_dataset(raw.get("dataset"))
        self._policy = self._parse_policy(raw.get("policy"))
        self._train = self._parse_train(raw.get("train") or {})
        self._model = self._parse_model(raw.get("model") or {})
        self.output_dir = Path(_require(raw.get("output") or {}, "dir", str, "output",
                                        default="runs"))
        if raw.get("output"):
            _reject_unknown(raw["output"], {"dir"}, "output")
        self.validate()

    @staticmethod
    def _parse_dataset(block) -> DatasetBlock:
        if not block:
            raise ConfigError("dataset", "missing block")
        _reject_unknown(block, {"kind", "path", "schema", "min_count", "synth"}, "dataset")
        kind = _require(block, "kind", str, "dataset", required=True)
        if kind not in ("file", "synthetic"):
            raise ConfigError("dataset.kind", f"must be file or synthetic, got {kind!r}")
        ds = DatasetBlock(
            kind=kind,
            path=_require(block, "path", str, "dataset"),
            schema=_require(block, "schema", str, "dataset"),
            min_count=_require(block, "min_count", int, "dataset", default=1),
        )
        if kind == "file":
            if not ds.path:
                raise ConfigError("dataset.path", "required when kind=file")
            if not ds.schema:
                raise ConfigError("dataset.schema", "required when kind=file")
            if ds.min_count < 1:
                raise ConfigError("dataset.min_count", "must be >= 1")
        else:
            synth = block.get("synth")
            if not synth:
                raise ConfigError("dataset.synth", "required when kind=synthetic")
            _reject_unknown(synth, {"n_users", "vocab_size", "mean_len", "signal_period",
                                    "n_types"}, "dataset.synth")
            ds.synth = SynthParams(
                n_users=_require(synth, "n_users", int, "dataset.synth", required=True),
                vocab_size=_require(synth, "vocab_size", int, "dataset.synth", required=True),
                mean_len=_require(synth, "mean_len", int, "dataset.synth", required=True),
                signal_period=_require(synth, "signal_period", int, "dataset.synth", required=True),
                n_types=_require(synth, "n_types", int, "dataset.synth", default=3),
            )
            for f in ("n_users", "vocab_size", "mean_len", "signal_period", "n_types"):
                if getattr(ds.synth, f) < 1:
                    raise ConfigError(f"dataset.synth.{f}", "must be >= 1")
        return ds

    @staticmethod
    def _parse_policy(block) -> WindowPolicy:
        if not block:
            raise ConfigError("policy", "missing block")
        _reject_unknown(block, {"mode", "window_size", "stride", "lookback"}, "policy")
        mode = _require(block, "mode", str, "policy", required=True)
        window_size = _require(block, "window_size", int, "policy", required=True)
        stride = _require(block, "stride", int, "policy", default=1)
        lookback = block.get("lookback", "inf")
        if lookback == "inf":
            lookback = UNBOUNDED
        elif not isinstance(lookback, int) or isinstance(lookback, bool):
            raise ConfigError("policy.lookback", f'must be an int or "inf", got {lookback!r}')
        try:
            return WindowPolicy(mode=mode, window_size=window_size, stride=stride,
                                lookback=lookback)
        except ValueError as exc:
            raise ConfigError("policy", str(exc)) from exc

    def _parse_train(self, block) -> TrainConfig:
        _reject_unknown(block, {"epochs", "batch_size", "learning_rate", "beta1", "beta2",
                                "adam_eps", "precision", "grad_clip"}, "train")
        try:
            return TrainConfig(
                epochs=_require(block, "epochs", int, "train", default=10),
                batch_size=_require(block, "batch_size", int, "train", default=32),
                learning_rate=_require(block, "learning_rate", float, "train", default=0.001),
                beta1=_require(block, "beta1", float, "train", default=0.9),
                beta2=_require(block, "beta2", float, "train", default=0.999),
                adam_eps=_require(block, "adam_eps", float, "train", default=1e-8),
                seed=self.seed,
                precision=_require(block, "precision", int, "train", default=32),
                grad_clip=_require(block, "grad_clip", float, "train", default=5.0),
            )
        except ValueError as exc:
            raise ConfigError("train", str(exc)) from exc

    def _parse_model(self, block) -> dict:
        _reject_unknown(block, {"emb_dim", "n_layers", "n_heads", "dropout", "ffn_dim",
                                "embedding", "kshift_k", "kshift_rows"}, "model")
        return {
            "d": _require(block, "emb_dim", int, "model", default=32),
            "n_layers": _require(block, "n_layers", int, "model", default=2),
            "n_heads": _require(block, "n_heads", int, "model", default=4),
            "dropout": _require(block, "dropout", float, "model", default=0.1),
            "ffn_dim": _require(block, "ffn_dim", int, "model", default=0),
            "embedding": _require(block, "embedding", str, "model", default="dense"),
            "kshift_k": _require(block, "kshift_k", int, "model", default=4),
            "kshift_rows": _require(block, "kshift_rows", int, "model", default=0),
        }

    def validate(self) -> None:
        """Cross-field checks; model shape is validated against a placeholder
        vocabulary when the real one is not known yet."""
        try:
            self.model_config(vocab_size=max(1, self._model["kshift_rows"]), n_types=1)
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from exc

    @property
    def policy(self) -> WindowPolicy:
        return self._policy

    @property
    def train_config(self) -> TrainConfig:
        return self._train

    def model_config(self, vocab_size: int, n_types: int) -> ModelConfig:
        return ModelConfig(
            d=self._model["d"], n_layers=self._model["n_layers"],
            n_heads=self._model["n_heads"], dropout=self._model["dropout"],
            window_size=self._policy.window_size, vocab_size=vocab_size,
            n_types=n_types, ffn_dim=self._model["ffn_dim"],
            embedding=self._model["embedding"], kshift_k=self._model["kshift_k"],
            kshift_rows=self._model["kshift_rows"],
        )

    def canonical(self) -> dict:
        lookback = self._policy.lookback
        return {
            "name": self.name,
            "seed": self.seed,
            "dataset": {
                "kind": self.dataset.kind, "path": self.dataset.path,
                "schema": self.dataset.schema, "min_count": self.dataset.min_count,
                "synth": None if not self.dataset.synth else vars(self.dataset.synth),
            },
            "model": {
                "emb_dim": self._model["d"], "n_layers": self._model["n_layers"],
                "n_heads": self._model["n_heads"], "dropout": self._model["dropout"],
                "ffn_dim": self._model["ffn_dim"], "embedding": self._model["embedding"],
                "kshift_k": self._model["kshift_k"], "kshift_rows": self._model["kshift_rows"],
            },
            "train": {
                "epochs": self._train.epochs, "batch_size": self._train.batch_size,
                "learning_rate": self._train.learning_rate, "beta1": self._train.beta1,
                "beta2": self._train.beta2, "adam_eps": self._train.adam_eps,
                "precision": self._train.precision, "grad_clip": self._train.grad_clip,
            },
            "policy": {
                "mode": self._policy.mode, "window_size": self._policy.window_size,
                "stride": self._policy.stride,
                "lookback": "inf" if lookback == UNBOUNDED else int(lookback),
            },
            "output": {"dir": str(self.output_dir)},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def dataset_hash(self) -> str:
        payload = self.canonical()["dataset"]
        payload["seed"] = self.seed if self.dataset.kind == "synthetic" else None
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def cache_dir(self) -> Path:
        return self.output_dir / f"cache-{self.dataset_hash()}"

    def run_dir(self) -> Path:
        return self.output_dir / f"{self.name}-{self.config_hash()}"

    def with_overrides(self, *, policy: Optional[WindowPolicy] = None,
                       name: Optional[str] = None, model: Optional[dict] = None) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.canonical()))
        raw["dataset"] = {k: v for k, v in raw["dataset"].items() if v is not None}
        if policy is not None:
            raw["policy"] = {
                "mode": policy.mode, "window_size": policy.window_size,
                "stride": policy.stride,
                "lookback": "inf" if policy.lookback == UNBOUNDED else int(policy.lookback),
            }
        if name is not None:
            raw["name"] = name
        if model:
            raw["model"].update(model)
        return ExperimentConfig(raw, source=self.source)


def load_experiment(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("<file>", f"{p}: top level must be an object")
    return ExperimentConfig(raw, source=p)
