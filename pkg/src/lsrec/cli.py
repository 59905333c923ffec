"""Operator surface.

Subcommands, all driven by a JSON experiment config:

    lsrec prepare --config c.json            build the binary sequence caches
    lsrec synth   --config c.json            same, synthetic datasets only
    lsrec train   --config c.json            train; writes checkpoint + runlog
    lsrec eval    --config c.json            rank the holdout; writes metrics
    lsrec ablate  --config c.json            regime x stride matrix + tables
    lsrec report  --run-dir DIR              emit plot-data CSV series

Exit codes: 0 success, 1 runtime failure, 2 usage/input error.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .cache import CacheFormatError, read_cache, write_cache
from .config import ConfigError, ExperimentConfig, load_experiment
from .evaluate import (MetricsReport, baseline_row, evaluate_model,
                       format_comparison_table, percent_change)
from .ingest import (EmptyVocabularyError, SchemaError, UnknownEventError,
                     build_sequences, build_vocabulary, generate_synthetic,
                     parse_events, split_holdout)
from .model import load_checkpoint, save_checkpoint
from .trainer import RunLog, TrainingDivergedError, train
from .windowing import WindowPolicy

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(RuntimeError):
    pass


def _threads_cap() -> int:
    raw = os.environ.get("LSR_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"LSR_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise UsageError(f"LSR_THREADS must be >= 1, got {cap}")
    return cap


def _prepare_dirs(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise UsageError(f"{path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True)


def cmd_prepare(cfg: ExperimentConfig, force: bool = False, synth_only: bool = False) -> Path:
    """Build train/eval caches plus a stats summary under the cache dir."""
    ds = cfg.dataset
    if synth_only and ds.kind != "synthetic":
        raise UsageError("the synth subcommand requires dataset.kind = synthetic")
    cache_dir = cfg.cache_dir()
    if (cache_dir / "train.lsr1").exists() and not force:
        print(f"cache already prepared at {cache_dir}")
        return cache_dir
    skipped = 0
    if ds.kind == "synthetic":
        sp = ds.synth
        sequences = generate_synthetic(sp.n_users, sp.vocab_size, sp.mean_len,
                                       sp.signal_period, cfg.seed, sp.n_types)
        vocab_size, n_types = sp.vocab_size, sp.n_types
        raw_interactions = int(sum(len(s) for s in sequences))
    else:
        path = Path(ds.path)
        if not path.exists():
            raise UsageError(f"dataset file not found: {path}")
        schema = ds.schema_descriptor()
        events, skipped = parse_events(path, schema)
        raw_interactions = len(events)
        vocab = build_vocabulary(events, ds.min_count)
        sequences = build_sequences(events, vocab)
        vocab_size, n_types = vocab.V, schema.n_types
    if not sequences:
        raise UsageError("no user has >= 2 events after filtering; nothing to train on")
    split = split_holdout(sequences)
    _prepare_dirs(cache_dir, force=True)  # existence handled above
    write_cache(cache_dir / "train.lsr1", split.train, vocab_size, n_types)
    write_cache(cache_dir / "eval.lsr1", sequences, vocab_size, n_types)
    stats = {
        "users": len(sequences),
        "items": vocab_size,
        "interactions": int(sum(len(s) for s in sequences)),
        "raw_interactions": raw_interactions,
        "behavior_types": n_types,
        "skipped_rows": skipped,
        "mean_sequence_length": float(np.mean([len(s) for s in sequences])),
    }
    (cache_dir / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(f"prepared {cache_dir}")
    for key, value in stats.items():
        print(f"  {key}: {value}")
    return cache_dir


def _load_split(cfg: ExperimentConfig):
    cache_dir = cfg.cache_dir()
    train_path = cache_dir / "train.lsr1"
    eval_path = cache_dir / "eval.lsr1"
    if not train_path.exists() or not eval_path.exists():
        raise UsageError(f"prepared cache missing under {cache_dir}; run `lsrec prepare` first")
    train_seqs, vocab_size, n_types = read_cache(train_path)
    full_seqs, _, _ = read_cache(eval_path)
    return train_seqs, full_seqs, vocab_size, n_types


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Train under the configured policy; writes checkpoint.lsrm,
    runlog.jsonl and the resolved config into the run directory."""
    train_seqs, _, vocab_size, n_types = _load_split(cfg)
    run_dir = cfg.run_dir()
    _prepare_dirs(run_dir, force)
    model_config = cfg.model_config(vocab_size, n_types)
    params, log = train(train_seqs, model_config, cfg.train_config, cfg.policy)
    save_checkpoint(run_dir / "checkpoint.lsrm", params)
    log.to_jsonl(run_dir / "runlog.jsonl")
    (run_dir / "config.json").write_text(json.dumps(cfg.canonical(), indent=2) + "\n")
    total = log.total_seconds
    print(f"trained {cfg.policy.label()}: {log.total_steps} steps, "
          f"{log.total_windows} windows, {total:.1f}s -> {run_dir}")
    return run_dir


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path | None = None,
             all_position_ppl: bool = False, eval_batch: int = 256) -> MetricsReport:
    """Evaluate a checkpoint on the held-out targets; writes metrics.json."""
    _, full_seqs, vocab_size, n_types = _load_split(cfg)
    run_dir = cfg.run_dir()
    ckpt_path = checkpoint or (run_dir / "checkpoint.lsrm")
    if not Path(ckpt_path).exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    params = load_checkpoint(ckpt_path, dtype=cfg.train_config.dtype)
    if params.config.vocab_size != vocab_size:
        raise UsageError(
            f"checkpoint vocabulary {params.config.vocab_size} does not match "
            f"cache vocabulary {vocab_size}")
    split = split_holdout(full_seqs)
    train_seconds = None
    runlog_path = run_dir / "runlog.jsonl"
    if runlog_path.exists():
        train_seconds = RunLog.from_jsonl(runlog_path).total_seconds
    report = evaluate_model(params, split.eval_cases, k=10, batch_size=eval_batch,
                            train_seconds=train_seconds,
                            all_position_ppl=all_position_ppl)
    run_dir.mkdir(parents=True, exist_ok=True)
    report.dump(run_dir / "metrics.json")
    print(f"eval {cfg.policy.label()}: perplexity {report.perplexity:.3f}  "
          f"MRR {report.mrr:.4f}  Recall@{report.k} {report.recall_at_k:.4f}  "
          f"cases {report.n_cases}" +
          (f"  train {train_seconds:.1f}s" if train_seconds else ""))
    return report


def _ablation_cells(cfg: ExperimentConfig, strides: list[int], mixed: list[int]):
    T = cfg.policy.window_size
    cells = [("control", WindowPolicy("control", T))]
    for s in strides:
        cells.append((f"all_sliding_s{s}", WindowPolicy("all_sliding", T, stride=s)))
    for n in mixed:
        cells.append((f"mixed_{n}", WindowPolicy("mixed", T, lookback=n)))
    return cells


def cmd_ablate(cfg: ExperimentConfig, strides: list[int], mixed: list[int],
               force: bool = False, eval_batch: int = 256) -> Path:
    """Run the regime/stride matrix sequentially with a shared seed and
    prepared cache so timing differences isolate the windowing policy."""
    cmd_prepare(cfg, force=False)
    matrix_dir = cfg.output_dir / f"ablate-{cfg.name}-{cfg.dataset_hash()}"
    if matrix_dir.exists() and not force:
        raise UsageError(f"{matrix_dir} already exists; pass --force to overwrite")
    matrix_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict] = {}
    results_path = matrix_dir / "comparison.json"
    try:
        for label, policy in _ablation_cells(cfg, strides, mixed):
            sub = cfg.with_overrides(policy=policy, name=f"{cfg.name}-{label}")
            run_dir = cmd_train(sub, force=True)
            report = cmd_eval(sub, eval_batch=eval_batch)
            results[label] = {
                "policy_label": policy.label(), "run_dir": str(run_dir),
                "stride": policy.stride, "mode": policy.mode,
                "metrics": report.to_dict(),
            }
            results_path.write_text(json.dumps(results, indent=2) + "\n")
    except Exception:
        if results:
            print(f"partial ablation results preserved at {results_path}", file=sys.stderr)
        raise
    reports = {label: MetricsReport.from_dict(r["metrics"]) for label, r in results.items()}

    control_rows = [baseline_row("Control")]
    for label, rep in reports.items():
        if label == "control":
            continue
        control_rows.append(percent_change(results[label]["policy_label"], rep,
                                           reports["control"]))
    table2 = format_comparison_table(control_rows)
    (matrix_dir / "comparison_vs_control.txt").write_text(table2)

    table3 = ""
    if "all_sliding_s1" in reports:
        stride_rows = [baseline_row("All-Sliding")]
        for label, rep in reports.items():
            if results[label]["mode"] == "all_sliding" and label != "all_sliding_s1":
                stride_rows.append(percent_change(results[label]["policy_label"], rep,
                                                  reports["all_sliding_s1"]))
        table3 = format_comparison_table(stride_rows)
        (matrix_dir / "comparison_vs_allsliding.txt").write_text(table3)

    print(table2)
    if table3:
        print(table3)
    print(f"ablation artifacts in {matrix_dir}")
    return matrix_dir


def cmd_report(run_dir: Path) -> list[Path]:
    """Emit plot-data CSVs from logs alone; re-emission is byte-identical."""
    run_dir = Path(run_dir)
    written = []
    runlog_path = run_dir / "runlog.jsonl"
    if runlog_path.exists():
        log = RunLog.from_jsonl(runlog_path)
        lines = ["epoch,flag,windows,steps,mean_loss,seconds"]
        for ep in log.epochs:
            lines.append(f"{ep.epoch},{ep.flag},{ep.windows},{ep.steps},"
                         f"{ep.mean_loss:.6f},{ep.seconds:.6f}")
        out = run_dir / "epoch_series.csv"
        out.write_text("\n".join(lines) + "\n")
        written.append(out)
    comparison_path = run_dir / "comparison.json"
    if comparison_path.exists():
        results = json.loads(comparison_path.read_text())
        stride_cells = sorted(
            (r for r in results.values() if r["mode"] == "all_sliding"),
            key=lambda r: r["stride"])
        if stride_cells:
            lines = ["stride,perplexity,mrr,recall,train_seconds"]
            for r in stride_cells:
                m = r["metrics"]
                secs = m["train_seconds"] if m["train_seconds"] is not None else float("nan")
                lines.append(f"{r['stride']},{m['perplexity']:.6f},{m['mrr']:.6f},"
                             f"{m['recall_at_k']:.6f},{secs:.6f}")
            out = run_dir / "stride_series.csv"
            out.write_text("\n".join(lines) + "\n")
            written.append(out)
        for label, r in results.items():
            sub = Path(r["run_dir"])
            if sub.exists():
                written.extend(cmd_report(sub))
    if not written:
        raise UsageError(f"no runlog.jsonl or comparison.json under {run_dir}")
    return written


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lsrec", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    add_config(sub.add_parser("prepare", help="build binary sequence caches"))
    add_config(sub.add_parser("synth", help="generate a synthetic dataset cache"))
    add_config(sub.add_parser("train", help="train under the configured policy"))

    pe = sub.add_parser("eval", help="evaluate a checkpoint on the holdout")
    pe.add_argument("--config", required=True)
    pe.add_argument("--checkpoint", default=None)
    pe.add_argument("--all-position-ppl", action="store_true")
    pe.add_argument("--eval-batch", type=int, default=256)

    pa = sub.add_parser("ablate", help="run the regime/stride matrix")
    pa.add_argument("--config", required=True)
    pa.add_argument("--force", action="store_true")
    pa.add_argument("--strides", default="1,2,4", help="comma-separated strides")
    pa.add_argument("--mixed", default="", help="comma-separated Mixed-N lookbacks")
    pa.add_argument("--eval-batch", type=int, default=256)

    pr = sub.add_parser("report", help="emit plot-data CSVs from run logs")
    pr.add_argument("--run-dir", required=True)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _threads_cap()
        if args.command in ("prepare", "synth", "train", "eval", "ablate"):
            cfg = load_experiment(args.config)
        if args.command in ("prepare", "synth"):
            cmd_prepare(cfg, force=args.force, synth_only=args.command == "synth")
        elif args.command == "train":
            cmd_prepare(cfg, force=False)
            cmd_train(cfg, force=args.force)
        elif args.command == "eval":
            cmd_eval(cfg, checkpoint=args.checkpoint and Path(args.checkpoint),
                     all_position_ppl=args.all_position_ppl, eval_batch=args.eval_batch)
        elif args.command == "ablate":
            strides = [int(s) for s in args.strides.split(",") if s]
            mixed = [int(s) for s in args.mixed.split(",") if s]
            cmd_ablate(cfg, strides, mixed, force=args.force, eval_batch=args.eval_batch)
        elif args.command == "report":
            for path in cmd_report(Path(args.run_dir)):
                print(f"wrote {path}")
    except (UsageError, ConfigError, SchemaError, UnknownEventError,
            EmptyVocabularyError, CacheFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps failures to exit 1
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
