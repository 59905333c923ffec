"""Acceptance suite: one test (or test group) per criterion, each printing a
PASS/runtime line.

Criteria 1-6 are oracle/property checks and run in seconds. Criteria 7-9
train the pinned-scale synthetic matrix (2000 users, V=1000, mean_len 300,
period 120 > T=100; paper-default model) through the real CLI in
subprocesses:

  phase A - serial on a quiet machine: seed 0 x {control, all-sliding s=1,
  s=2, s=4}. All wall-clock comparisons use only these runs.
  phase B - two runs at a time (one per core): seeds 1 and 2 replicas plus
  the k-shift cell; only their metrics are used, never their timings.

Stated runtime budgets are asserted for criteria 1-6; for the training
criteria the spec gives desk-scale targets ("target < 30/45 min"), which
this host cannot represent faithfully - measured times are printed and the
directional/ratio assertions carry the acceptance.

Criterion 10 requires the manually downloaded Retailrocket events.csv
(point RETAILROCKET_EVENTS at it); it is skipped when absent.
"""
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from lsrec.embedding import KShiftTable, collision_stats
from lsrec.evaluate import mrr, perplexity, rank_of_target, recall_at_k
from lsrec.hashing import hash_id, hash_ids, row_indices, row_indices_batch, splitmix64, string_seed
from lsrec.model import Batch, ModelConfig, Parameters, forward, loss_next_item, backward, make_batch
from lsrec.windowing import UNBOUNDED, WindowPolicy, sliding_windows
from tests.conftest import make_sequence

GOLDEN = Path(__file__).parent / "golden" / "kshift_vectors.txt"
SRC = Path(__file__).resolve().parent.parent / "src"


def _report(criterion, detail, t0, budget=None):
    elapsed = time.perf_counter() - t0
    line = f"ACCEPTANCE {criterion}: PASS ({elapsed:.1f}s"
    if budget is not None:
        line += f", budget {budget:.0f}s"
    print(line + f") {detail}")
    return elapsed


# --------------------------------------------------------------------------
# 1. bit-exact hashing


def test_criterion_1_bit_exact_hashing():
    t0 = time.perf_counter()
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    lines = GOLDEN.read_text().splitlines()
    assert len(lines) == 100
    for line in lines:
        parts = [int(x) for x in line.split()]
        v, seed, k, rows = parts[:4]
        assert row_indices(hash_id(v, seed), k, rows) == parts[4:]
        batch = row_indices_batch(hash_ids(np.asarray([v], dtype=np.uint64), seed), k, rows)
        assert batch[0].tolist() == parts[4:]
    elapsed = _report(1, "splitmix64 vector + 100 golden tuples", t0, 1)
    assert elapsed < 1.0


# --------------------------------------------------------------------------
# 2. k-shift correctness (norms, gradients, collisions)


def test_criterion_2_lookup_norms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    table = KShiftTable(4096, 32, 4, rng, np.float64)
    ids = rng.integers(0, 2 ** 40, 10_000)
    out, _ = table.forward(ids)
    norms = np.linalg.norm(out, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-6
    elapsed = _report("2a", "10k lookups unit-norm within 1e-6", t0, 30)
    assert elapsed < 30


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(100):
        rows = int(rng.integers(3, 64))
        dim = int(rng.integers(2, 16))
        k = int(rng.integers(1, 8))
        table = KShiftTable(rows, dim, k, np.random.default_rng(trial), np.float64)
        ids = rng.integers(0, 2 ** 30, 3)
        upstream = rng.standard_normal((3, dim))
        out, cache = table.forward(ids)
        grad = table.backward(cache, upstream)

        def objective():
            o, _ = table.forward(ids)
            return float((o * upstream).sum())

        flat = table.values.reshape(-1)
        gflat = grad.reshape(-1)
        hot = np.flatnonzero(np.abs(gflat) > 1e-9)
        for i in rng.choice(hot, size=min(4, len(hot)), replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            up = objective()
            flat[i] = old - 1e-6
            dn = objective()
            flat[i] = old
            fd = (up - dn) / 2e-6
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-10))
    assert worst < 1e-5
    elapsed = _report("2b", f"100 gradient instances, worst rel err {worst:.2e}", t0, 30)
    assert elapsed < 30


def test_criterion_2_collisions():
    """As specified: 10k ids, k=2, rows=65536 must give <= 3 full collisions.

    This is unattainable with the bit-rotation probe formula itself: probe 1
    is rotl(z, 1), a deterministic function of the same z, so for rows=2^16
    the two probes share 15 low bits and a colliding pair needs only 17
    matching bits, not 32. The birthday figure (~0.01) assumes independent
    probes; the true expectation is C(10k,2)/2^17 ~ 381. The assertion is
    kept as written; see the decisions ledger.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    ids = rng.choice(2 ** 40, size=10_000, replace=False)
    stats = collision_stats(ids, k=2, rows=65536, feature_seed=string_seed("item"))
    elapsed = time.perf_counter() - t0
    print(f"ACCEPTANCE 2c: observed {stats.full_collision_pairs} full-collision "
          f"pairs ({elapsed:.1f}s); spec expects <= 3 assuming independent probes")
    assert elapsed < 30
    assert stats.full_collision_pairs <= 3


# --------------------------------------------------------------------------
# 3. model gradient check at the pinned configuration


def test_criterion_3_model_gradcheck():
    t0 = time.perf_counter()
    cfg = ModelConfig(d=8, n_layers=1, n_heads=2, dropout=0.0, window_size=6,
                      vocab_size=20, n_types=3)
    params = Parameters.init(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    seqs = [make_sequence(f"u{i}", rng.integers(0, 20, n), rng.integers(0, 3, n))
            for i, n in enumerate((6, 5, 3, 2))]
    batch = make_batch(seqs, np.arange(4), np.zeros(4, int),
                       np.asarray([6, 5, 3, 2]), 6, cfg.pad_id)
    logits, cache = forward(params, batch)
    grads = backward(params, cache, batch)
    step = 1e-5
    worst = 0.0
    worst_name = ""
    for name, tensor in params.named_tensors():
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):  # every coordinate of every tensor
            old = flat[i]
            flat[i] = old + step
            lp = loss_next_item(forward(params, batch)[0], batch)[0]
            flat[i] = old - step
            lm = loss_next_item(forward(params, batch)[0], batch)[0]
            flat[i] = old
            fd = (lp - lm) / (2 * step)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-7)
            if rel > worst:
                worst, worst_name = rel, name
    assert worst < 1e-4, f"worst {worst:.2e} at {worst_name}"
    elapsed = _report(3, f"{params.n_params} coords, worst rel err {worst:.2e} ({worst_name})",
                      t0, 120)
    assert elapsed < 120


# --------------------------------------------------------------------------
# 4. causality under random future perturbations


def test_criterion_4_causality():
    t0 = time.perf_counter()
    cfg = ModelConfig(d=32, n_layers=2, n_heads=4, dropout=0.1, window_size=20,
                      vocab_size=50, n_types=3)
    params = Parameters.init(cfg, seed=1, dtype=np.float32)
    rng = np.random.default_rng(3)
    M, T = 20, cfg.window_size
    seqs = [make_sequence(f"u{i}", rng.integers(0, 50, T), rng.integers(0, 3, T))
            for i in range(M)]
    batch = make_batch(seqs, np.arange(M), np.zeros(M, int), np.full(M, T), T, cfg.pad_id)
    base, _ = forward(params, batch)
    trials = 0
    for _ in range(50):  # 50 rounds x 20 rows = 1000 perturbation trials
        j = int(rng.integers(0, T - 1))
        pert = Batch(batch.x.copy(), batch.types.copy(), batch.pads, batch.targets)
        for row in range(M):
            jp = int(rng.integers(j + 1, T))
            pert.x[row, jp] = rng.integers(0, 50)
            pert.types[row, jp] = rng.integers(0, 3)
        got, _ = forward(params, pert)
        assert np.array_equal(base[:, :j + 1, :], got[:, :j + 1, :])
        trials += M
    assert trials == 1000
    elapsed = _report(4, "1000 future perturbations leave past logits bit-equal", t0, 60)
    assert elapsed < 60


# --------------------------------------------------------------------------
# 5. window enumeration sweep against brute force and the closed form


def brute_force_sliding(n, T, s, C):
    if n < 2:
        return []
    n_eff = n if C == UNBOUNDED else min(n, int(C))
    base = n - n_eff
    need = min(T, n_eff)
    out = []
    j = 0
    while n - j * s - base >= need:
        end = n - j * s
        out.append((max(base, end - T), end))
        j += 1
    return out


def test_criterion_5_window_enumeration_sweep():
    t0 = time.perf_counter()
    checked = 0
    for n in range(2, 301):
        for T in (3, 10, 100):
            for s in (1, 2, 4):
                for C in (T, 50, UNBOUNDED):
                    got = sliding_windows(n, T, s, C)
                    assert got == brute_force_sliding(n, T, s, C), (n, T, s, C)
                    n_eff = n if C == UNBOUNDED else min(n, int(C))
                    expected = 1 if n_eff <= T else (n_eff - T) // s + 1
                    assert len(got) == expected, (n, T, s, C)
                    checked += 1
    elapsed = _report(5, f"{checked} (n, T, s, C) combinations", t0, 30)
    assert elapsed < 30


# --------------------------------------------------------------------------
# 6. metric oracles


def _sort_oracle_rank(logits, target):
    order = sorted(range(len(logits)), key=lambda j: (-logits[j], j == target))
    return order.index(target) + 1


def test_criterion_6_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    for _ in range(1000):
        V = int(rng.integers(2, 1001))
        logits = np.round(rng.standard_normal(V), 2)  # coarse grid forces ties
        target = int(rng.integers(V))
        assert rank_of_target(logits, target) == _sort_oracle_rank(logits, target)

    # MRR / Recall@10 invariance under random strictly monotone transforms
    logits = rng.standard_normal((200, 400))
    targets = rng.integers(0, 400, 200)
    ranks = np.asarray([rank_of_target(l, t) for l, t in zip(logits, targets)])
    for _ in range(10):
        knots = np.sort(rng.standard_normal(17) * 3)
        values = np.cumsum(rng.random(17) + 1e-3)  # strictly increasing map
        warped = np.interp(logits, knots, values) + \
            np.where(logits > knots[-1], logits - knots[-1], 0) + \
            np.where(logits < knots[0], logits - knots[0], 0)
        ranks2 = np.asarray([rank_of_target(l, t) for l, t in zip(warped, targets)])
        assert (ranks == ranks2).all()
        assert mrr(ranks) == mrr(ranks2)
        assert recall_at_k(ranks, 10) == recall_at_k(ranks2, 10)

    for V in (3, 417, 1000):
        assert abs(perplexity(123 * math.log(V), 123) - V) < 1e-9 * V
    elapsed = _report(6, "rank oracle x1000, monotone invariance, exact uniform ppl", t0, 30)
    assert elapsed < 30


# --------------------------------------------------------------------------
# 7-9. directional synthetic matrix through the CLI


USERS, VOCAB, MEAN_LEN, PERIOD, T = 2000, 1000, 300, 120, 100
SEEDS = (0, 1, 2)


def _base_config(out_dir, seed, name, policy, model_over=None):
    cfg = {
        "name": name,
        "seed": seed,
        "dataset": {"kind": "synthetic",
                    "synth": {"n_users": USERS, "vocab_size": VOCAB,
                              "mean_len": MEAN_LEN, "signal_period": PERIOD,
                              "n_types": 3}},
        "model": {"emb_dim": 32, "n_layers": 2, "n_heads": 4, "dropout": 0.1},
        "train": {"epochs": 10, "batch_size": 32, "learning_rate": 0.001,
                  "precision": 32},
        "policy": policy,
        "output": {"dir": str(out_dir)},
    }
    if model_over:
        cfg["model"].update(model_over)
    return cfg


CELLS = {
    "control": {"mode": "control", "window_size": T},
    "as1": {"mode": "all_sliding", "window_size": T, "stride": 1},
    "as2": {"mode": "all_sliding", "window_size": T, "stride": 2},
    "as4": {"mode": "all_sliding", "window_size": T, "stride": 4},
}


def _subprocess_env():
    existing = os.environ.get("PYTHONPATH", "")
    pythonpath = str(SRC) + (os.pathsep + existing if existing else "")
    return dict(os.environ, PYTHONPATH=pythonpath, OMP_NUM_THREADS="1",
                OPENBLAS_NUM_THREADS="1")


def _run_cell(out_dir, name, seed, policy, model_over=None):
    """prepare/train/eval one cell in a fresh interpreter; returns metrics
    plus runlog accounting."""
    cfg = _base_config(out_dir, seed, name, policy, model_over)
    cfg_path = out_dir / f"{name}.json"
    cfg_path.write_text(json.dumps(cfg))
    env = _subprocess_env()
    log_path = out_dir / f"{name}.log"
    with open(log_path, "w") as log_fh:
        for cmd in (["train", "--config", str(cfg_path), "--force"],
                    ["eval", "--config", str(cfg_path)]):
            proc = subprocess.run([sys.executable, "-m", "lsrec", *cmd],
                                  stdout=log_fh, stderr=subprocess.STDOUT, env=env)
            assert proc.returncode == 0, f"{name}: {cmd[0]} failed, see {log_path}"
    sys.path.insert(0, str(SRC))
    from lsrec.config import ExperimentConfig
    from lsrec.trainer import RunLog

    exp = ExperimentConfig(cfg)
    run_dir = exp.run_dir()
    metrics = json.loads((run_dir / "metrics.json").read_text())
    runlog = RunLog.from_jsonl(run_dir / "runlog.jsonl")
    return {"metrics": metrics, "seconds": runlog.total_seconds,
            "windows": runlog.total_windows, "steps": runlog.total_steps}


@pytest.fixture(scope="module")
def synthetic_matrix(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("acceptance")
    env = _subprocess_env()
    cfg = _base_config(out_dir, SEEDS[0], "prep", CELLS["control"])
    cfg_path = out_dir / "prep.json"
    cfg_path.write_text(json.dumps(cfg))
    proc = subprocess.run([sys.executable, "-m", "lsrec", "prepare",
                           "--config", str(cfg_path)], capture_output=True, env=env)
    assert proc.returncode == 0, proc.stderr

    results = {}
    t_a = time.perf_counter()
    # phase A: serial timing-grade runs, seed 0
    for cell, policy in CELLS.items():
        results[(cell, SEEDS[0])] = _run_cell(out_dir, f"{cell}-s{SEEDS[0]}",
                                              SEEDS[0], policy)
    phase_a = time.perf_counter() - t_a

    # phase B: metric replicas and the k-shift cell, two at a time
    jobs = [(cell, seed, None) for seed in SEEDS[1:] for cell in CELLS]
    jobs.append(("kshift_as2", SEEDS[0],
                 {"embedding": "kshift", "kshift_rows": VOCAB // 4, "kshift_k": 4}))
    t_b = time.perf_counter()
    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = {}
        for cell, seed, model_over in jobs:
            policy = CELLS["as2"] if cell == "kshift_as2" else CELLS[cell]
            futures[(cell, seed)] = pool.submit(
                _run_cell, out_dir, f"{cell}-s{seed}", seed, policy, model_over)
        for key, fut in futures.items():
            results[key] = fut.result()
    phase_b = time.perf_counter() - t_b
    results["_phase_seconds"] = (phase_a, phase_b)
    return results


@pytest.mark.slow
def test_criterion_7_directional_sliding_vs_control(synthetic_matrix):
    t0 = time.perf_counter()
    r = synthetic_matrix
    for seed in SEEDS:
        as_m = r[("as1", seed)]["metrics"]
        ctl_m = r[("control", seed)]["metrics"]
        assert as_m["mrr"] > ctl_m["mrr"], f"seed {seed}"
        assert as_m["perplexity"] < ctl_m["perplexity"], f"seed {seed}"
    predicted = r[("as1", SEEDS[0])]["windows"] / r[("control", SEEDS[0])]["windows"]
    measured = r[("as1", SEEDS[0])]["seconds"] / r[("control", SEEDS[0])]["seconds"]
    assert 0.8 * predicted <= measured <= 1.2 * predicted, (predicted, measured)
    train_secs = sum(r[("as1", s)]["seconds"] + r[("control", s)]["seconds"] for s in SEEDS)
    _report(7, f"3/3 seeds MRR+ppl; time ratio {measured:.1f} vs predicted "
               f"{predicted:.1f}; training wall {train_secs / 60:.0f} min "
               f"(desk-scale target 30 min)", t0)


@pytest.mark.slow
def test_criterion_8_stride_frontier(synthetic_matrix):
    t0 = time.perf_counter()
    r = synthetic_matrix
    s0 = SEEDS[0]
    t1, t2, t4 = (r[("as" + k, s0)]["seconds"] for k in "124")
    assert t1 > t2 > t4, (t1, t2, t4)
    assert 0.5 <= t2 / t1 <= 0.85, t2 / t1
    means = {k: np.mean([r[("as" + k, s)]["metrics"]["mrr"] for s in SEEDS])
             for k in "124"}
    assert means["1"] >= means["2"] >= means["4"], means
    _report(8, f"times {t1:.0f}/{t2:.0f}/{t4:.0f}s (s2/s1={t2 / t1:.2f}); "
               f"mean MRR {means['1']:.4f} >= {means['2']:.4f} >= {means['4']:.4f}", t0)


@pytest.mark.slow
def test_criterion_9_kshift_vs_dense(synthetic_matrix):
    t0 = time.perf_counter()
    r = synthetic_matrix
    dense = r[("as2", SEEDS[0])]
    kshift = r[("kshift_as2", SEEDS[0])]
    ratio = kshift["metrics"]["mrr"] / dense["metrics"]["mrr"]
    assert ratio >= 0.85, ratio
    # storage independence from the vocabulary size
    for vocab in (VOCAB, 100 * VOCAB):
        cfg = ModelConfig(d=32, n_layers=2, n_heads=4, dropout=0.1, window_size=T,
                          vocab_size=vocab, n_types=3, embedding="kshift",
                          kshift_k=4, kshift_rows=VOCAB // 4)
        params = Parameters.init(cfg, seed=0, dtype=np.float32)
        assert params.item.n_params == (VOCAB // 4) * 32
        assert params.item.values.shape == (VOCAB // 4, 32)
    both = dense["seconds"] + kshift["seconds"]
    _report(9, f"kshift/dense MRR {ratio:.3f} >= 0.85; item table fixed at "
               f"{VOCAB // 4}x32 for V=1k and V=100k; both runs {both / 60:.0f} min "
               f"(desk-scale target 45 min)", t0)


# --------------------------------------------------------------------------
# 10. optional Retailrocket directional check


RETAILROCKET_ENV = "RETAILROCKET_EVENTS"


@pytest.mark.download
@pytest.mark.skipif(RETAILROCKET_ENV not in os.environ,
                    reason=f"set {RETAILROCKET_ENV} to the downloaded events.csv")
def test_criterion_10_retailrocket_directional(tmp_path):
    from lsrec.evaluate import evaluate_model
    from lsrec.ingest import RETAILROCKET, build_sequences, build_vocabulary, parse_events, split_holdout
    from lsrec.trainer import TrainConfig, train

    t0 = time.perf_counter()
    events, skipped = parse_events(os.environ[RETAILROCKET_ENV], RETAILROCKET)
    # magnitude fences around the published table: 417,053 items and
    # 2,756,101 interactions before filtering
    assert 2_000_000 < len(events) < 3_500_000
    raw_items = len({e.item for e in events})
    assert 300_000 < raw_items < 500_000
    vocab = build_vocabulary(events, min_count=5)
    sequences = build_sequences(events, vocab)
    rng = np.random.default_rng(0)
    subsample = [sequences[i] for i in rng.choice(len(sequences), 3000, replace=False)]
    split = split_holdout(subsample)
    mc = ModelConfig(d=32, n_layers=2, n_heads=4, dropout=0.1, window_size=T,
                     vocab_size=vocab.V, n_types=3)
    tc = TrainConfig(epochs=3, batch_size=32, seed=0, precision=32)
    reports = {}
    for label, policy in (("control", WindowPolicy("control", T)),
                          ("as1", WindowPolicy("all_sliding", T))):
        params, log = train(split.train, mc, tc, policy)
        reports[label] = evaluate_model(params, split.eval_cases,
                                        train_seconds=log.total_seconds)
    assert reports["as1"].mrr >= reports["control"].mrr
    assert reports["as1"].recall_at_k >= reports["control"].recall_at_k
    _report(10, f"AS mrr {reports['as1'].mrr:.4f} >= control "
                f"{reports['control'].mrr:.4f}; recall likewise", t0)
