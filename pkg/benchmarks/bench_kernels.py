"""Benchmark the compiled kernel core against the numpy fallback.

Per-kernel microbenchmarks run both implementations in-process; the
end-to-end training-step comparison launches fresh interpreters with
LSR_KERNELS=ext / LSR_KERNELS=py so backend selection happens the same way
it does for users.

    python benchmarks/bench_kernels.py [--steps 12] [--batch 32]
"""
import argparse
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

SRC = Path(__file__).resolve().parent.parent / "src"
sys.path.insert(0, str(SRC))

from lsrec._kernels import numpy_impl  # noqa: E402

try:
    from lsrec._kernels import _ext as ext
except ImportError:
    ext = None


def timeit(fn, repeat=30):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e3


def per_kernel_table():
    rng = np.random.default_rng(0)
    M, T, H, V, d = 32, 100, 4, 1000, 32
    ids = rng.integers(0, 2 ** 40, M * T).astype(np.uint64)
    table = rng.standard_normal((250, d)).astype(np.float32)
    idx = rng.integers(0, 250, (M * T, 4))
    g = rng.standard_normal((M * T, d)).astype(np.float32)
    logits = rng.standard_normal((2048, V)).astype(np.float32)
    bias = np.zeros(V, dtype=np.float32)
    tg = rng.integers(0, V, 2048)
    w = np.full(2048, 1.0 / 2048)
    scores = rng.standard_normal((M * H, T, T)).astype(np.float32)
    pads = rng.integers(0, 20, M * H)
    x = rng.standard_normal((M * T, d)).astype(np.float32)
    lng = np.ones(d, np.float32)
    lnb = np.zeros(d, np.float32)
    u = rng.standard_normal(M * T * 4 * d).astype(np.float32)

    def bench_pair(name, make):
        rows.append((name, timeit(make(numpy_impl)),
                     timeit(make(ext)) if ext else float("nan")))

    rows = []
    z = numpy_impl.hash_ids(ids, 7)
    bench_pair("hash_ids 3.2k", lambda impl: lambda: impl.hash_ids(ids, 7))
    bench_pair("row_indices k=4", lambda impl: lambda: impl.row_indices_batch(z, 4, 250))
    bench_pair("gather_sum", lambda impl: lambda: impl.gather_sum(table, idx))

    def scatter(impl):
        buf = np.zeros_like(table)
        return lambda: impl.scatter_add_multi(buf, idx, g)

    bench_pair("scatter_add k=4", scatter)

    def xent(impl):
        nll = np.empty(2048)
        db = np.zeros(V)
        return lambda: impl.softmax_xent_grad(logits.copy(), bias, tg, w, nll, db)

    bench_pair("softmax_xent 2048xV", xent)
    bench_pair("rank_nll 2048xV", lambda impl: lambda: impl.rank_nll(logits, tg))
    bench_pair("attn_softmax fwd", lambda impl: lambda: impl.attn_softmax_fwd(
        scores.copy(), pads, 0.35))

    def ln(impl):
        y = np.empty_like(x)
        mean = np.empty(M * T, np.float32)
        rstd = np.empty(M * T, np.float32)
        return lambda: impl.ln_fwd(x, lng, lnb, y, mean, rstd, 1e-5)

    bench_pair("layernorm fwd", ln)
    bench_pair("gelu fwd 410k", lambda impl: lambda: impl.gelu_fwd(u))

    def drop(impl):
        buf = u.copy()
        return lambda: impl.dropout_fwd(buf, 0.1, 12345)

    bench_pair("dropout 410k", drop)

    print(f"{'kernel':24s} {'numpy ms':>10s} {'compiled ms':>12s} {'speedup':>8s}")
    for name, py_ms, ext_ms in rows:
        speed = f"{py_ms / ext_ms:.1f}x" if ext else "-"
        print(f"{name:24s} {py_ms:10.3f} {ext_ms:12.3f} {speed:>8s}")


TRAIN_SNIPPET = """
import time
import numpy as np
from lsrec.ingest import generate_synthetic, split_holdout
from lsrec.model import ModelConfig, Parameters, make_batch, train_step, DropoutStream
from lsrec.trainer import TrainConfig, AdamState, adam_step, clip_grads_
from lsrec.windowing import WindowPolicy, epoch_plan
import lsrec._kernels as kernels

steps, batch = {steps}, {batch}
seqs = generate_synthetic(100, 1000, 300, 120, seed=7)
split = split_holdout(seqs)
lengths = [len(s) for s in split.train]
mc = ModelConfig(d=32, n_layers=2, n_heads=4, dropout=0.1, window_size=100,
                 vocab_size=1000, n_types=3)
plan = epoch_plan(lengths, WindowPolicy("all_sliding", 100), 0, 0)
tc = TrainConfig(epochs=1, batch_size=batch, precision=32)
params = Parameters.init(mc, 0, np.float32)
state = AdamState()
ds = DropoutStream(1)
times = []
for i in range(steps + 3):
    a = i * batch
    b = make_batch(split.train, plan.users[a:a+batch], plan.starts[a:a+batch],
                   plan.ends[a:a+batch], 100, mc.pad_id)
    t0 = time.perf_counter()
    loss, ntok, grads = train_step(params, b, train=True, dropout_stream=ds)
    clip_grads_(grads, tc.grad_clip)
    adam_step(params, grads, state, tc)
    if i >= 3:
        times.append(time.perf_counter() - t0)
print(f"{{kernels.BACKEND}} {{np.median(times) * 1e3:.1f}}")
"""


def end_to_end(steps, batch):
    print(f"\ntraining step (d=32, L=2, T=100, V=1000, batch {batch}), "
          f"median of {steps} steps:")
    for backend in ("ext", "py"):
        if backend == "ext" and ext is None:
            print("  ext: not built")
            continue
        env = dict(os.environ, LSR_KERNELS=backend, PYTHONPATH=str(SRC),
                   OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
        out = subprocess.run([sys.executable, "-c",
                              TRAIN_SNIPPET.format(steps=steps, batch=batch)],
                             capture_output=True, text=True, env=env)
        if out.returncode != 0:
            print(f"  {backend}: FAILED\n{out.stderr}")
            continue
        name, ms = out.stdout.split()
        print(f"  {name}: {float(ms):7.1f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=12)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args()
    if ext is None:
        print("note: compiled extension not built "
              "(python setup.py build_ext --inplace); numpy column only")
    per_kernel_table()
    end_to_end(args.steps, args.batch)


if __name__ == "__main__":
    main()
