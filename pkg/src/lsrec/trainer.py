"""Seeded training loop: epoch plans -> batches -> Adam updates, with
wall-clock and window accounting per epoch.

Identical (config, seed, precision, platform, kernel backend) runs produce
bit-identical parameters and RunLogs. Timing starts after dataset and
parameter setup; window enumeration, batching and updates are inside the
per-epoch clock.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .model import (Batch, DropoutStream, ModelConfig, NonFiniteError,
                    Parameters, make_batch, train_step)
from .windowing import WindowPolicy, epoch_plan, is_sliding_epoch, window_count


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: int = 32
    grad_clip: float = 5.0  # global norm; 0 disables

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("betas must lie in [0, 1)")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables)")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


class AdamState:
    """First/second moment buffers per named tensor plus the step counter."""

    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def ensure(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(params: Parameters, grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    b1, b2 = config.beta1, config.beta2
    lr = config.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params.get_tensor(name)
        state.ensure(name, p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + config.adam_eps)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))


def clip_grads_(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class EpochStats:
    epoch: int
    flag: str  # "recent" or "sliding"
    windows: int
    steps: int
    mean_loss: float
    seconds: float


@dataclass
class RunLog:
    epochs: list[EpochStats] = field(default_factory=list)
    total_steps: int = 0
    total_windows: int = 0
    total_seconds: float = 0.0
    fingerprint: dict = field(default_factory=dict)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for ep in self.epochs:
                fh.write(json.dumps({"record": "epoch", **asdict(ep)}) + "\n")
            fh.write(json.dumps({
                "record": "summary", "total_steps": self.total_steps,
                "total_windows": self.total_windows,
                "total_seconds": self.total_seconds,
                "fingerprint": self.fingerprint,
            }) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "RunLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("record")
            if kind == "epoch":
                log.epochs.append(EpochStats(**rec))
            elif kind == "summary":
                log.total_steps = rec["total_steps"]
                log.total_windows = rec["total_windows"]
                log.total_seconds = rec["total_seconds"]
                log.fingerprint = rec.get("fingerprint", {})
        return log


def _fingerprint(model_config: ModelConfig, train_config: TrainConfig,
                 policy: WindowPolicy) -> dict:
    payload = json.dumps({
        "model": model_config.to_dict(),
        "train": asdict(train_config),
        "policy": {"mode": policy.mode, "window_size": policy.window_size,
                   "stride": policy.stride,
                   "lookback": None if policy.lookback == float("inf") else int(policy.lookback)},
    }, sort_keys=True)
    return {
        "config_sha256": hashlib.sha256(payload.encode()).hexdigest()[:16],
        "seed": train_config.seed,
        "precision": train_config.precision,
        "kernels": _kernels.BACKEND,
        "numpy": np.__version__,
    }


def train(train_sequences, model_config: ModelConfig, train_config: TrainConfig,
          policy: WindowPolicy):
    """Run the full schedule; returns (Parameters, RunLog)."""
    dtype = train_config.dtype
    params = Parameters.init(model_config, train_config.seed, dtype)
    state = AdamState()
    dropout_stream = DropoutStream(train_config.seed)
    lengths = [len(s) for s in train_sequences]
    log = RunLog(fingerprint=_fingerprint(model_config, train_config, policy))
    T = model_config.window_size
    pad_id = model_config.pad_id
    bs = train_config.batch_size

    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        plan = epoch_plan(lengths, policy, epoch, train_config.seed)
        expected = sum(window_count(n, policy, epoch) for n in lengths)
        assert len(plan) == expected, "window accounting drift"
        loss_sum = 0.0
        tok_sum = 0
        steps = 0
        for a in range(0, len(plan), bs):
            b = min(a + bs, len(plan))
            batch = make_batch(train_sequences, plan.users[a:b], plan.starts[a:b],
                               plan.ends[a:b], T, pad_id)
            try:
                loss, n_tok, grads = train_step(params, batch, train=True,
                                                dropout_stream=dropout_stream)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch} step {steps}: {exc}") from exc
            clip_grads_(grads, train_config.grad_clip)
            adam_step(params, grads, state, train_config)
            loss_sum += loss * n_tok
            tok_sum += n_tok
            steps += 1
        seconds = time.perf_counter() - t0
        log.epochs.append(EpochStats(
            epoch=epoch,
            flag="sliding" if is_sliding_epoch(policy, epoch) else "recent",
            windows=len(plan), steps=steps,
            mean_loss=loss_sum / max(tok_sum, 1), seconds=seconds,
        ))
        log.total_steps += steps
        log.total_windows += len(plan)
        log.total_seconds += seconds
    return params, log
