"""Pure-numpy implementations of the hot kernels.

Mirrors the signatures of the compiled extension (`_ext.pyx`). Selected as a
fallback when the extension is not built, or when LSR_KERNELS=py. All
functions are deterministic; in-place semantics match the extension.
"""
from __future__ import annotations

import numpy as np

_U64 = np.uint64


def splitmix64_array(x):
    x = x.astype(np.uint64, copy=True)
    x += _U64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> _U64(27))) * _U64(0x94D049BB133111EB)
    return x ^ (x >> _U64(31))


def hash_ids(values, feature_seed):
    seeded = splitmix64_array(np.asarray([feature_seed], dtype=np.uint64))[0]
    return splitmix64_array(values ^ seeded)


def row_indices_batch(z, k, n_rows):
    out = np.empty((z.shape[0], k), dtype=np.int64)
    rows = _U64(n_rows)
    for i in range(k):
        if i == 0:
            rot = z
        else:
            rot = (z << _U64(i)) | (z >> _U64(64 - i))
        out[:, i] = (rot % rows).astype(np.int64)
    return out


def gather_sum(table, idx):
    # (B, d) gathered at (N, k) -> (N, d)
    return table[idx].sum(axis=1)


def scatter_add_multi(out, idx, g):
    for i in range(idx.shape[1]):
        np.add.at(out, idx[:, i], g)


def scatter_add(out, ids, g):
    np.add.at(out, ids, g)


def softmax_xent_grad(logits, bias, targets, weights, nll_out, db_accum):
    """Per-row softmax cross-entropy over (logits + bias); replaces logits
    with d(loss)/d(logits) in place.

    Rows with weight 0 are zeroed and get nll 0. nll_out receives the
    unweighted per-row negative log-likelihood; the in-place gradient is
    (softmax - onehot) * weight and is also accumulated into db_accum.
    """
    active = weights > 0
    nll_out[:] = 0
    if not active.any():
        logits[:] = 0
        return
    sub = logits[active] + bias
    t = targets[active]
    m = sub.max(axis=1, keepdims=True)
    np.subtract(sub, m, out=sub)
    target_logit = sub[np.arange(sub.shape[0]), t].copy()
    np.exp(sub, out=sub)
    s = sub.sum(axis=1, keepdims=True)
    nll = np.log(s[:, 0]) - target_logit
    np.divide(sub, s, out=sub)
    sub[np.arange(sub.shape[0]), t] -= 1
    sub *= weights[active, None].astype(sub.dtype)
    logits[:] = 0
    logits[active] = sub
    nll_out[active] = nll
    db_accum += logits.sum(axis=0, dtype=np.float64)


def rank_nll(logits, targets):
    """Pessimistic rank of the target plus its NLL, per row.

    rank = 1 + #{j != t : l_j > l_t} + #{j != t : l_j == l_t}.
    """
    n = logits.shape[0]
    rows = np.arange(n)
    lt = logits[rows, targets]
    greater = (logits > lt[:, None]).sum(axis=1)
    equal = (logits == lt[:, None]).sum(axis=1) - 1
    ranks = 1 + greater + equal
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    nll = lse - lt
    return ranks.astype(np.int64), nll.astype(np.float64)


def _allowed_mask(T, pads, dtype=bool):
    # allowed[r, q, j]: j <= q and (j >= pad_r or j == q)
    q = np.arange(T)[None, :, None]
    j = np.arange(T)[None, None, :]
    p = np.asarray(pads)[:, None, None]
    return (j <= q) & ((j >= p) | (j == q))


def attn_softmax_fwd(scores, pads, scale):
    """Masked softmax of (scale * scores), in place.

    Key j is visible to query q iff j <= q and (j >= pad or j == q); the
    self key keeps left-padded queries well-defined without leaking pad
    content into real positions.
    """
    allowed = _allowed_mask(scores.shape[1], pads)
    neg = np.finfo(scores.dtype).min
    np.copyto(scores, neg, where=~allowed)
    m = scores.max(axis=2, keepdims=True)
    np.subtract(scores, m, out=scores)
    scores *= np.asarray(scale, dtype=scores.dtype)
    np.exp(scores, out=scores)
    scores[~allowed] = 0
    s = scores.sum(axis=2, keepdims=True)
    np.divide(scores, s, out=scores)


def attn_softmax_bwd(probs, dprobs, pads, scale):
    """Backward of attn_softmax_fwd, in place into dprobs.

    d(raw) = scale * P * (dP - sum_j dP_j P_j); masked entries end up 0
    because P is 0 there.
    """
    inner = np.einsum("rqj,rqj->rq", dprobs, probs)[:, :, None]
    np.subtract(dprobs, inner, out=dprobs)
    np.multiply(dprobs, probs, out=dprobs)
    dprobs *= np.asarray(scale, dtype=dprobs.dtype)


def ln_fwd(x, g, b, y, mean, rstd, eps):
    mu = x.mean(axis=1)
    xc = x - mu[:, None]
    var = (xc * xc).mean(axis=1)
    r = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(x.dtype)
    mean[:] = mu
    rstd[:] = r
    y[:] = g * (xc * r[:, None]) + b


def ln_bwd(dy, x, mean, rstd, g, dx, dg, db):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = dy * g
    dg += (dy * xhat).sum(axis=0, dtype=np.float64)
    db += dy.sum(axis=0, dtype=np.float64)
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx[:] = (dxhat - m1 - xhat * m2) * rstd[:, None]


def _keep_mask(n, p, nonce):
    # 24-bit draws from a counter-based splitmix64 stream; the integer
    # threshold compare must match the compiled kernel bit for bit
    idx = np.uint64(nonce) + np.arange(n, dtype=np.uint64)
    thr = _U64(int(p * 16777216.0))
    return (splitmix64_array(idx) >> _U64(40)) >= thr


def dropout_fwd(x, p, nonce):
    keep = _keep_mask(x.shape[0], p, nonce)
    x *= keep
    x *= np.asarray(1.0 / (1.0 - p), dtype=x.dtype)


def dropout_bwd(dy, out, p, nonce):
    keep = _keep_mask(dy.shape[0], p, nonce)
    np.multiply(dy, keep, out=out)
    out *= np.asarray(1.0 / (1.0 - p), dtype=out.dtype)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    """tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3)))."""
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner)).astype(x.dtype, copy=False)


def gelu_bwd(x, dy):
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    sech2 = 1.0 - t * t
    local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return (dy * local).astype(x.dtype, copy=False)
