"""Causal transformer next-item model with hand-written gradients.

Input embedding is the sum of item, interaction-type and position tables;
the encoder is a stack of post-layernorm blocks (masked multi-head
self-attention, then a GELU feedforward, residuals around both); a final
linear head projects to vocabulary logits. Windows are left-padded: pad
slots carry the reserved pad id, attend only to themselves, and are excluded
from the loss, so real positions never see pad content.

`forward`/`loss_next_item`/`backward` form the reference path; `train_step`
fuses the head, softmax and loss gradient in cache-sized blocks and must
produce identical numbers (tested against the reference path).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .embedding import DenseTable, KShiftTable

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"LSRM"


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    window_size: int = 100
    vocab_size: int = 0
    n_types: int = 3
    ffn_dim: int = 0  # 0 means 4*d
    embedding: str = "dense"  # "dense" | "kshift"
    kshift_k: int = 4
    kshift_rows: int = 0

    def __post_init__(self):
        if self.d < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("d, n_layers, n_heads must be >= 1")
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.window_size < 2:
            raise ValueError(f"window_size must be >= 2, got {self.window_size}")
        if self.vocab_size < 1 or self.n_types < 1:
            raise ValueError("vocab_size and n_types must be >= 1")
        if self.embedding not in ("dense", "kshift"):
            raise ValueError(f"embedding must be dense or kshift, got {self.embedding!r}")
        if self.embedding == "kshift":
            if self.kshift_rows < 1:
                raise ValueError("kshift embedding requires kshift_rows >= 1")
            if not 1 <= self.kshift_k <= 63:
                raise ValueError(f"kshift_k must be in [1, 63], got {self.kshift_k}")
        if self.ffn_dim < 0:
            raise ValueError("ffn_dim must be >= 0")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim else 4 * self.d

    @property
    def pad_id(self) -> int:
        return self.vocab_size

    def to_dict(self) -> dict:
        return {
            "d": self.d, "n_layers": self.n_layers, "n_heads": self.n_heads,
            "dropout": self.dropout, "window_size": self.window_size,
            "vocab_size": self.vocab_size, "n_types": self.n_types,
            "ffn_dim": self.ffn_dim, "embedding": self.embedding,
            "kshift_k": self.kshift_k, "kshift_rows": self.kshift_rows,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(**raw)


def causal_mask(T: int) -> np.ndarray:
    """allow[q, k] iff k <= q."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return np.tril(np.ones((T, T), dtype=bool))


class Parameters:
    """All learnable tensors. The item table is a backend object (dense or
    k-shift); everything else lives in a name -> array dict whose iteration
    order (after "item_table") is the checkpoint tensor order."""

    def __init__(self, config: ModelConfig, item_table, tensors: dict[str, np.ndarray]):
        self.config = config
        self.item = item_table
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float64) -> "Parameters":
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x696E6974])  # "init"
        d, ffn, V = config.d, config.ffn, config.vocab_size
        if config.embedding == "dense":
            item = DenseTable(V + 1, d, rng, dtype)  # +1: reserved pad row
        else:
            item = KShiftTable(config.kshift_rows, d, config.kshift_k, rng, dtype)
        bound = 1.0 / np.sqrt(d)

        def mat(*shape):
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        tensors: dict[str, np.ndarray] = {
            "type_table": mat(config.n_types, d),
            "pos_table": mat(config.window_size, d),
        }
        for l in range(config.n_layers):
            p = f"layer{l}."
            tensors[p + "att_wq"] = mat(d, d)
            tensors[p + "att_wk"] = mat(d, d)
            tensors[p + "att_wv"] = mat(d, d)
            tensors[p + "att_wo"] = mat(d, d)
            tensors[p + "ln1_g"] = np.ones(d, dtype=dtype)
            tensors[p + "ln1_b"] = np.zeros(d, dtype=dtype)
            tensors[p + "ffn_w1"] = mat(d, ffn)
            tensors[p + "ffn_b1"] = np.zeros(ffn, dtype=dtype)
            tensors[p + "ffn_w2"] = mat(ffn, d)
            tensors[p + "ffn_b2"] = np.zeros(d, dtype=dtype)
            tensors[p + "ln2_g"] = np.ones(d, dtype=dtype)
            tensors[p + "ln2_b"] = np.zeros(d, dtype=dtype)
        tensors["fc_w"] = mat(d, V)
        tensors["fc_b"] = np.zeros(V, dtype=dtype)
        return cls(config, item, tensors)

    def named_tensors(self):
        yield "item_table", self.item.values
        yield from self.tensors.items()

    def get_tensor(self, name: str) -> np.ndarray:
        return self.item.values if name == "item_table" else self.tensors[name]

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        if name == "item_table":
            self.item.values = value
        else:
            self.tensors[name] = value

    @property
    def n_params(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def expected_n_params(self) -> int:
        """Closed-form count: the dense item table grows linearly in V, the
        k-shift table is rows*d independent of V."""
        c = self.config
        d, ffn = c.d, c.ffn
        item = (c.vocab_size + 1) * d if c.embedding == "dense" else c.kshift_rows * d
        per_layer = 4 * d * d + d * ffn + ffn + ffn * d + d + 4 * d
        return item + c.n_types * d + c.window_size * d + c.n_layers * per_layer \
            + d * c.vocab_size + c.vocab_size

    def copy(self) -> "Parameters":
        import copy as _copy

        item = _copy.copy(self.item)
        item.values = self.item.values.copy()
        return Parameters(self.config, item, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        out = self.copy()
        out.item.values = out.item.values.astype(dtype)
        out.tensors = {k: v.astype(dtype) for k, v in out.tensors.items()}
        return out

    @property
    def dtype(self):
        return self.tensors["fc_w"].dtype


@dataclass
class Batch:
    """Left-padded training windows.

    x: (M, T) item ids with pad_id in the first pads[i] slots.
    types: (M, T) behavior codes (0 at pad slots).
    pads: (M,) pad counts.
    targets: (M, T) next item within the window, -1 where no target
    (pad slots and the final position).
    """

    x: np.ndarray
    types: np.ndarray
    pads: np.ndarray
    targets: np.ndarray


def make_batch(sequences, users, starts, ends, window_size: int, pad_id: int) -> Batch:
    M, T = len(users), window_size
    x = np.full((M, T), pad_id, dtype=np.int64)
    types = np.zeros((M, T), dtype=np.int64)
    targets = np.full((M, T), -1, dtype=np.int64)
    pads = np.empty(M, dtype=np.int64)
    for i in range(M):
        seq = sequences[users[i]]
        s, e = int(starts[i]), int(ends[i])
        w = e - s
        pads[i] = T - w
        x[i, T - w:] = seq.items[s:e]
        types[i, T - w:] = seq.types[s:e]
        targets[i, T - w:T - 1] = seq.items[s + 1:e]
    return Batch(x=x, types=types, pads=pads, targets=targets)


def _layernorm_fwd(x, g, b):
    """Returns (y, cache); cache holds the flat input plus per-row mean and
    reciprocal std."""
    d = x.shape[-1]
    xf = np.ascontiguousarray(x.reshape(-1, d))
    y = np.empty_like(xf)
    mean = np.empty(xf.shape[0], dtype=xf.dtype)
    rstd = np.empty(xf.shape[0], dtype=xf.dtype)
    _kernels.ln_fwd(xf, g, b, y, mean, rstd, LN_EPS)
    return y.reshape(x.shape), (xf, mean, rstd)


def _layernorm_bwd(dy, ln_cache, g):
    xf, mean, rstd = ln_cache
    dyf = np.ascontiguousarray(dy.reshape(xf.shape))
    dx = np.empty_like(xf)
    dg = np.zeros(xf.shape[1], dtype=np.float64)
    db = np.zeros(xf.shape[1], dtype=np.float64)
    _kernels.ln_bwd(dyf, xf, mean, rstd, g, dx, dg, db)
    return dx.reshape(dy.shape), dg.astype(g.dtype), db.astype(g.dtype)


class DropoutStream:
    """Deterministic nonce source for counter-based dropout masks.

    Masks are a pure function of (nonce, flat element index); replaying the
    seed and call order replays every mask, which is what lets the backward
    pass regenerate them instead of storing them.
    """

    def __init__(self, seed: int):
        from .hashing import splitmix64

        self._base = splitmix64((seed ^ 0x64726F704F757421) & 0xFFFFFFFFFFFFFFFF)
        self._calls = 0

    def next_nonce(self) -> int:
        from .hashing import splitmix64

        self._calls += 1
        return splitmix64((self._base + self._calls) & 0xFFFFFFFFFFFFFFFF)


def _dropout(x, p, stream, train):
    """Inverted dropout in place (x must be freshly allocated); returns the
    nonce needed to replay the mask, or None when inactive."""
    if not train or p == 0.0 or stream is None:
        return x, None
    nonce = stream.next_nonce()
    _kernels.dropout_fwd(x.reshape(-1), p, nonce)
    return x, nonce


def _dropout_bwd(dy, p, nonce):
    if nonce is None:
        return dy
    out = np.empty_like(dy)
    _kernels.dropout_bwd(np.ascontiguousarray(dy).reshape(-1), out.reshape(-1), p, nonce)
    return out


def _check_finite(arr, where: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


def embed_inputs(params: Parameters, batch: Batch, train: bool = False,
                 dropout_stream: Optional[DropoutStream] = None):
    """e[i, j] = item(x[i, j]) + type(t[i, j]) + pos(j), with train-mode
    dropout. Returns (e, (item_cache, dropout_nonce))."""
    cfg = params.config
    M, T = batch.x.shape
    if batch.x.max() > cfg.pad_id or batch.x.min() < 0:
        raise IndexError(f"item id out of range [0, {cfg.pad_id}]")
    if batch.types.max() >= cfg.n_types or batch.types.min() < 0:
        raise IndexError(f"type code out of range [0, {cfg.n_types})")
    item_vec, item_cache = params.item.forward(batch.x)
    e = item_vec.reshape(M, T, cfg.d) \
        + params.tensors["type_table"][batch.types] \
        + params.tensors["pos_table"][None, :T, :]
    e = np.ascontiguousarray(e, dtype=params.dtype)
    e, emb_nonce = _dropout(e, cfg.dropout, dropout_stream, train)
    return e, (item_cache, emb_nonce)


def _split_heads(flat, M, T, H, dh):
    # (M*T, d) -> (M, H, T, dh) strided view; batched matmul handles it
    return flat.reshape(M, T, H, dh).transpose(0, 2, 1, 3)


def _merge_heads(four, M, T, H, dh):
    # (M, H, T, dh) -> (M*T, d) contiguous copy
    return np.ascontiguousarray(four.transpose(0, 2, 1, 3)).reshape(M * T, H * dh)


def encoder_forward(params: Parameters, batch: Batch, train: bool = False,
                    dropout_stream: Optional[DropoutStream] = None):
    """Embedding sum + encoder stack; returns final hidden states (M, T, d)
    and the cache for the backward pass."""
    cfg = params.config
    M, T = batch.x.shape
    d, H = cfg.d, cfg.n_heads
    dh = d // H
    scale = 1.0 / math.sqrt(dh)

    e, (item_cache, emb_nonce) = embed_inputs(params, batch, train, dropout_stream)
    _check_finite(e, "embeddings")

    pads_rep = np.repeat(batch.pads, H)
    h = e
    layers = []
    for l in range(cfg.n_layers):
        t = params.tensors
        p = f"layer{l}."
        x_in = h
        hf = h.reshape(M * T, d)
        qf = hf @ t[p + "att_wq"]
        kf = hf @ t[p + "att_wk"]
        vf = hf @ t[p + "att_wv"]
        q4 = _split_heads(qf, M, T, H, dh)
        k4 = _split_heads(kf, M, T, H, dh)
        v4 = _split_heads(vf, M, T, H, dh)
        probs = q4 @ k4.transpose(0, 1, 3, 2)  # (M, H, T, T), contiguous
        _kernels.attn_softmax_fwd(probs.reshape(M * H, T, T), pads_rep, scale)
        ctx = _merge_heads(probs @ v4, M, T, H, dh)
        attn_out = (ctx @ t[p + "att_wo"]).reshape(M, T, d)
        attn_out, att_nonce = _dropout(attn_out, cfg.dropout, dropout_stream, train)
        y1, ln1 = _layernorm_fwd(x_in + attn_out, t[p + "ln1_g"], t[p + "ln1_b"])
        u = y1.reshape(M * T, d) @ t[p + "ffn_w1"]
        u += t[p + "ffn_b1"]
        a = _kernels.gelu_fwd(u)
        f = (a @ t[p + "ffn_w2"] + t[p + "ffn_b2"]).reshape(M, T, d)
        f, ffn_nonce = _dropout(f, cfg.dropout, dropout_stream, train)
        h, ln2 = _layernorm_fwd(y1 + f, t[p + "ln2_g"], t[p + "ln2_b"])
        _check_finite(h, f"encoder layer {l}")
        layers.append(dict(x_in=x_in, qf=qf, kf=kf, vf=vf, probs=probs, ctx=ctx,
                           att_nonce=att_nonce, ln1=ln1, y1=y1,
                           u=u, a=a, ffn_nonce=ffn_nonce, ln2=ln2))
    cache = dict(batch=batch, item_cache=item_cache, emb_nonce=emb_nonce,
                 layers=layers, pads_rep=pads_rep, h=h)
    return h, cache


def encoder_backward(params: Parameters, cache, dh: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter given d(loss)/d(final hidden states)."""
    cfg = params.config
    batch: Batch = cache["batch"]
    M, T = batch.x.shape
    d, H = cfg.d, cfg.n_heads
    dhh = d // H
    scale = 1.0 / math.sqrt(dhh)
    drop = cfg.dropout
    t = params.tensors
    grads: dict[str, np.ndarray] = {}

    g = dh
    for l in reversed(range(cfg.n_layers)):
        p = f"layer{l}."
        c = cache["layers"][l]
        dr2, dg2, db2 = _layernorm_bwd(g, c["ln2"], t[p + "ln2_g"])
        grads[p + "ln2_g"], grads[p + "ln2_b"] = dg2, db2
        df = _dropout_bwd(dr2, drop, c["ffn_nonce"]).reshape(M * T, d)
        grads[p + "ffn_w2"] = c["a"].T @ df
        grads[p + "ffn_b2"] = df.sum(axis=0)
        da = df @ t[p + "ffn_w2"].T
        du = _kernels.gelu_bwd(c["u"], np.ascontiguousarray(da))
        grads[p + "ffn_w1"] = c["y1"].reshape(M * T, d).T @ du
        grads[p + "ffn_b1"] = du.sum(axis=0)
        dy1 = (du @ t[p + "ffn_w1"].T).reshape(M, T, d) + dr2
        dr1, dg1, db1 = _layernorm_bwd(dy1, c["ln1"], t[p + "ln1_g"])
        grads[p + "ln1_g"], grads[p + "ln1_b"] = dg1, db1
        dattn = _dropout_bwd(dr1, drop, c["att_nonce"]).reshape(M * T, d)
        grads[p + "att_wo"] = c["ctx"].T @ dattn
        q4 = _split_heads(c["qf"], M, T, H, dhh)
        k4 = _split_heads(c["kf"], M, T, H, dhh)
        v4 = _split_heads(c["vf"], M, T, H, dhh)
        dctx4 = _split_heads(dattn @ t[p + "att_wo"].T, M, T, H, dhh)
        dprobs = dctx4 @ v4.transpose(0, 1, 3, 2)  # (M, H, T, T) contiguous
        dv4 = c["probs"].transpose(0, 1, 3, 2) @ dctx4
        _kernels.attn_softmax_bwd(c["probs"].reshape(M * H, T, T),
                                  dprobs.reshape(M * H, T, T), cache["pads_rep"], scale)
        dq4 = dprobs @ k4
        dk4 = dprobs.transpose(0, 1, 3, 2) @ q4
        dq_f = _merge_heads(dq4, M, T, H, dhh)
        dk_f = _merge_heads(dk4, M, T, H, dhh)
        dv_f = _merge_heads(dv4, M, T, H, dhh)
        x_f = c["x_in"].reshape(M * T, d)
        grads[p + "att_wq"] = x_f.T @ dq_f
        grads[p + "att_wk"] = x_f.T @ dk_f
        grads[p + "att_wv"] = x_f.T @ dv_f
        dx = dq_f @ t[p + "att_wq"].T + dk_f @ t[p + "att_wk"].T + dv_f @ t[p + "att_wv"].T
        g = dx.reshape(M, T, d) + dr1

    de = _dropout_bwd(g, drop, cache["emb_nonce"])
    grads["pos_table"] = de.reshape(M, T, d).sum(axis=0)
    tg = np.zeros_like(t["type_table"])
    _kernels.scatter_add(tg, np.ascontiguousarray(batch.types.reshape(-1)),
                         np.ascontiguousarray(de.reshape(M * T, d)))
    grads["type_table"] = tg
    grads["item_table"] = params.item.backward(cache["item_cache"], de.reshape(M * T, d))
    return grads


def head_forward(params: Parameters, h: np.ndarray) -> np.ndarray:
    M, T, d = h.shape
    V = params.config.vocab_size
    return (h.reshape(M * T, d) @ params.tensors["fc_w"]
            + params.tensors["fc_b"]).reshape(M, T, V)


def forward(params: Parameters, batch: Batch, train: bool = False,
            dropout_stream: Optional[DropoutStream] = None):
    """Reference path: full logits (M, T, V) plus the backward cache."""
    h, cache = encoder_forward(params, batch, train, dropout_stream)
    logits = head_forward(params, h)
    _check_finite(logits, "output head")
    cache["logits"] = logits
    return logits, cache


def loss_next_item(logits: np.ndarray, batch: Batch):
    """Mean NLL over positions with a target. Returns (mean, per-token NLLs
    in flat row order, token count)."""
    M, T, V = logits.shape
    flat = logits.reshape(M * T, V)
    targets = batch.targets.reshape(-1)
    mask = targets >= 0
    n_tok = int(mask.sum())
    if n_tok == 0:
        raise ValueError("batch has no target positions")
    sub = flat[mask]
    m = sub.max(axis=1, keepdims=True)
    lse = np.log(np.exp(sub - m).sum(axis=1)) + m[:, 0]
    nll = lse - sub[np.arange(n_tok), targets[mask]]
    return float(nll.mean()), nll, n_tok


def backward(params: Parameters, cache, batch: Batch) -> dict[str, np.ndarray]:
    """Gradients of the mean next-item NLL for every parameter (reference
    path; requires the cache of forward())."""
    logits = cache["logits"]
    M, T, V = logits.shape
    h = cache["h"]
    targets = batch.targets.reshape(-1)
    mask = targets >= 0
    n_tok = int(mask.sum())
    if n_tok == 0:
        raise ValueError("batch has no target positions")
    flat = logits.reshape(M * T, V)
    m = flat.max(axis=1, keepdims=True)
    p = np.exp(flat - m)
    p /= p.sum(axis=1, keepdims=True)
    dlogits = p
    dlogits[np.arange(M * T)[mask], targets[mask]] -= 1.0
    dlogits[~mask] = 0.0
    dlogits /= n_tok
    hf = h.reshape(M * T, -1)
    grads = {
        "fc_w": hf.T @ dlogits,
        "fc_b": dlogits.sum(axis=0),
    }
    dh = (dlogits @ params.tensors["fc_w"].T).reshape(h.shape)
    grads.update(encoder_backward(params, cache, dh))
    return grads


def train_step(params: Parameters, batch: Batch, train: bool = True,
               dropout_stream: Optional[DropoutStream] = None, block: int = 2048):
    """Fused training step: encoder forward, blocked head + softmax + loss
    gradient (full logits are never materialized), encoder backward.

    Returns (mean loss, token count, grads).
    """
    cfg = params.config
    h, cache = encoder_forward(params, batch, train, dropout_stream)
    M, T = batch.x.shape
    d, V = cfg.d, cfg.vocab_size
    hf = h.reshape(M * T, d)
    targets = batch.targets.reshape(-1)
    mask = targets >= 0
    n_tok = int(mask.sum())
    if n_tok == 0:
        raise ValueError("batch has no target positions")
    weights = np.where(mask, 1.0 / n_tok, 0.0)
    tg = np.where(mask, targets, 0)
    fc_w, fc_b = params.tensors["fc_w"], params.tensors["fc_b"]
    dW = np.zeros_like(fc_w)
    db64 = np.zeros(V, dtype=np.float64)
    dh = np.empty_like(hf)
    nll_blk = np.empty(min(block, M * T), dtype=np.float64)
    nll_sum = 0.0
    for a in range(0, M * T, block):
        b = min(a + block, M * T)
        logits_blk = hf[a:b] @ fc_w
        _kernels.softmax_xent_grad(logits_blk, fc_b, tg[a:b], weights[a:b],
                                   nll_blk[:b - a], db64)
        nll_sum += nll_blk[:b - a].sum()  # masked rows contribute exactly 0
        dW += hf[a:b].T @ logits_blk
        np.matmul(logits_blk, fc_w.T, out=dh[a:b])
    loss = nll_sum / n_tok
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite training loss")
    grads = {"fc_w": dW, "fc_b": db64.astype(fc_b.dtype)}
    grads.update(encoder_backward(params, cache, dh.reshape(M, T, d)))
    return loss, n_tok, grads


def save_checkpoint(path: str | Path, params: Parameters) -> None:
    """"LSRM" file: magic, length-prefixed JSON config block, then raw
    little-endian float64 tensors in named_tensors order."""
    blob = json.dumps({"format": 1, "model": params.config.to_dict()},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, tensor in params.named_tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, dtype=np.float64) -> Parameters:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (blob_len,) = struct.unpack_from("<I", data, 4)
    blob = json.loads(data[8:8 + blob_len].decode("utf-8"))
    if blob.get("format") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint format {blob.get('format')}")
    config = ModelConfig.from_dict(blob["model"])
    params = Parameters.init(config, seed=0, dtype=dtype)
    off = 8 + blob_len
    layout = [(name, tensor.shape, tensor.size) for name, tensor in params.named_tensors()]
    for name, shape, n in layout:
        end = off + 8 * n
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {name!r}")
        values = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        params.set_tensor(name, values.astype(dtype))
        off = end
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return params
