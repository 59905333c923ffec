"""Held-out next-item evaluation: perplexity, MRR, Recall@K over
full-vocabulary ranking, plus percentage-change comparison tables.

Ranking is pessimistic on ties (ties count against the model), which keeps
the metrics deterministic and conservative. Perplexity is computed over the
holdout next-item tokens; all-position validation perplexity is available
behind a flag.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .ingest import EvalCase
from .model import (Parameters, encoder_forward, head_forward,
                    loss_next_item, make_batch)


@dataclass
class MetricsReport:
    perplexity: float
    mrr: float
    recall_at_k: float
    k: int
    n_cases: int
    train_seconds: Optional[float] = None
    ppl_all_positions: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "perplexity": self.perplexity, "mrr": self.mrr,
            "recall_at_k": self.recall_at_k, "k": self.k,
            "n_cases": self.n_cases, "train_seconds": self.train_seconds,
            "ppl_all_positions": self.ppl_all_positions,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        return cls(**raw)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(open(path).read()))


def rank_of_target(logits: np.ndarray, target: int) -> int:
    """Pessimistic rank: 1 + strictly-greater count + tie count (self
    excluded)."""
    logits = np.asarray(logits)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range [0, {logits.shape[0]})")
    lt = logits[target]
    greater = int((logits > lt).sum())
    ties = int((logits == lt).sum()) - 1
    return 1 + greater + ties


def mrr(ranks: Sequence[int]) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    return float((1.0 / ranks).mean())


def recall_at_k(ranks: Sequence[int], k: int = 10) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    return float((ranks <= k).mean())


def perplexity(nll_sum: float, token_count: int) -> float:
    if token_count <= 0:
        raise ValueError("token_count must be > 0")
    return float(np.exp(nll_sum / token_count))


def evaluate_model(params: Parameters, eval_cases: list[EvalCase], k: int = 10,
                   batch_size: int = 256, train_seconds: Optional[float] = None,
                   all_position_ppl: bool = False) -> MetricsReport:
    """Rank each case's target against the full vocabulary from its user's
    most recent window. Cases are consumed in input (user-sorted) order, so
    aggregation is deterministic."""
    cfg = params.config
    T = cfg.window_size
    if not eval_cases:
        raise ValueError("no evaluation cases")
    ranks = np.empty(len(eval_cases), dtype=np.int64)
    nll_sum = 0.0
    all_nll_sum = 0.0
    all_tok = 0
    contexts = [c.context for c in eval_cases]
    fc_w, fc_b = params.tensors["fc_w"], params.tensors["fc_b"]
    for a in range(0, len(eval_cases), batch_size):
        b = min(a + batch_size, len(eval_cases))
        users = np.arange(a, b)
        ends = np.asarray([len(contexts[i]) for i in range(a, b)])
        starts = np.maximum(ends - T, 0)
        batch = make_batch(contexts, users, starts, ends, T, cfg.pad_id)
        h, _ = encoder_forward(params, batch, train=False)
        last = np.ascontiguousarray(h[:, -1, :] @ fc_w + fc_b)
        targets = np.asarray([eval_cases[i].target_item for i in range(a, b)], dtype=np.int64)
        r, nll = _kernels.rank_nll(last, targets)
        ranks[a:b] = r
        nll_sum += float(nll.sum())
        if all_position_ppl and (batch.targets >= 0).any():
            logits = head_forward(params, h)
            _, nlls, n_tok = loss_next_item(logits, batch)
            all_nll_sum += float(nlls.sum())
            all_tok += n_tok
    report = MetricsReport(
        perplexity=perplexity(nll_sum, len(eval_cases)),
        mrr=mrr(ranks),
        recall_at_k=recall_at_k(ranks, k),
        k=k,
        n_cases=len(eval_cases),
        train_seconds=train_seconds,
    )
    if all_position_ppl:
        report.ppl_all_positions = perplexity(all_nll_sum, all_tok)
    return report


@dataclass
class ComparisonRow:
    label: str
    perplexity: Optional[float]  # signed percent change vs the baseline
    mrr: Optional[float]
    recall: Optional[float]
    seconds: Optional[float]
    is_baseline: bool = False


def _pct(variant: Optional[float], control: Optional[float]) -> Optional[float]:
    if variant is None or control is None or control == 0:
        return None
    return 100.0 * (variant - control) / control


def percent_change(label: str, variant: MetricsReport, control: MetricsReport) -> ComparisonRow:
    """Signed percentage change of each metric relative to the control run;
    lower-is-better metrics (perplexity, time) keep their natural sign."""
    return ComparisonRow(
        label=label,
        perplexity=_pct(variant.perplexity, control.perplexity),
        mrr=_pct(variant.mrr, control.mrr),
        recall=_pct(variant.recall_at_k, control.recall_at_k),
        seconds=_pct(variant.train_seconds, control.train_seconds),
    )


def baseline_row(label: str) -> ComparisonRow:
    return ComparisonRow(label, None, None, None, None, is_baseline=True)


def format_comparison_table(rows: list[ComparisonRow]) -> str:
    """Aligned text table: Model, Perplexity, MRR, Recall, Training Time.
    Baseline cells render as an em-dash, signed percentages elsewhere."""
    headers = ["Model", "Perplexity", "MRR", "Recall", "Training Time"]

    def cell(value: Optional[float], baseline: bool) -> str:
        if baseline or value is None:
            return "—"
        return f"{value:+.2f}%"

    table = [[r.label, cell(r.perplexity, r.is_baseline), cell(r.mrr, r.is_baseline),
              cell(r.recall, r.is_baseline), cell(r.seconds, r.is_baseline)] for r in rows]
    widths = [max(len(headers[c]), *(len(row[c]) for row in table)) for c in range(5)]
    lines = ["  ".join(h.ljust(widths[c]) for c, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for row in table:
        lines.append("  ".join(v.ljust(widths[c]) for c, v in enumerate(row)))
    return "\n".join(lines) + "\n"
