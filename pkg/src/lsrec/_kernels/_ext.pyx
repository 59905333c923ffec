# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: hashing, embedding gather/scatter, fused softmax losses,
layernorm and counter-based dropout.

Signatures mirror numpy_impl.py; both backends must satisfy the same tests.
Hot loops run over row pointers (unit stride) so gcc can vectorize exp/tanh
via libmvec.
"""
import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, expf, log, sqrt, tanh, tanhf

cnp.import_array()

ctypedef unsigned long long u64
ctypedef long long i64

ctypedef fused floating:
    float
    double


cdef inline u64 _splitmix64(u64 x) nogil:
    x += <u64>0x9E3779B97F4A7C15
    x = (x ^ (x >> 30)) * <u64>0xBF58476D1CE4E5B9
    x = (x ^ (x >> 27)) * <u64>0x94D049BB133111EB
    return x ^ (x >> 31)


def splitmix64_array(const u64[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef u64[::1] o = out
    for i in range(n):
        o[i] = _splitmix64(x[i])
    return out


def hash_ids(const u64[::1] values, u64 feature_seed):
    cdef Py_ssize_t n = values.shape[0], i
    cdef u64 seeded = _splitmix64(feature_seed)
    out = np.empty(n, dtype=np.uint64)
    cdef u64[::1] o = out
    for i in range(n):
        o[i] = _splitmix64(values[i] ^ seeded)
    return out


def row_indices_batch(const u64[::1] z, int k, u64 n_rows):
    cdef Py_ssize_t n = z.shape[0], i
    cdef int j
    cdef u64 rot
    out = np.empty((n, k), dtype=np.int64)
    cdef i64[:, ::1] o = out
    for i in range(n):
        for j in range(k):
            if j == 0:
                rot = z[i]
            else:
                rot = (z[i] << j) | (z[i] >> (64 - j))
            o[i, j] = <i64>(rot % n_rows)
    return out


def gather_sum(const floating[:, ::1] table, const i64[:, ::1] idx):
    cdef Py_ssize_t n = idx.shape[0], k = idx.shape[1], d = table.shape[1]
    cdef Py_ssize_t i, j, c
    cdef const floating* src
    cdef floating* dst
    if floating is float:
        out = np.zeros((n, d), dtype=np.float32)
    else:
        out = np.zeros((n, d), dtype=np.float64)
    cdef floating[:, ::1] o = out
    for i in range(n):
        dst = &o[i, 0]
        for j in range(k):
            src = &table[idx[i, j], 0]
            for c in range(d):
                dst[c] += src[c]
    return out


def scatter_add_multi(floating[:, ::1] out, const i64[:, ::1] idx, const floating[:, ::1] g):
    cdef Py_ssize_t n = idx.shape[0], k = idx.shape[1], d = out.shape[1]
    cdef Py_ssize_t i, j, c
    cdef const floating* src
    cdef floating* dst
    for i in range(n):
        src = &g[i, 0]
        for j in range(k):
            dst = &out[idx[i, j], 0]
            for c in range(d):
                dst[c] += src[c]


def scatter_add(floating[:, ::1] out, const i64[::1] ids, const floating[:, ::1] g):
    cdef Py_ssize_t n = ids.shape[0], d = out.shape[1]
    cdef Py_ssize_t i, c
    cdef const floating* src
    cdef floating* dst
    for i in range(n):
        src = &g[i, 0]
        dst = &out[ids[i], 0]
        for c in range(d):
            dst[c] += src[c]


def softmax_xent_grad(floating[:, ::1] logits, const floating[::1] bias,
                      const i64[::1] targets, const double[::1] weights,
                      double[::1] nll_out, double[::1] db_accum):
    """Row softmax cross-entropy over (logits + bias); logits are replaced
    by the loss gradient in place.

    Rows with weight 0 are zeroed with nll 0; nll is unweighted, the
    gradient (softmax - onehot) is scaled by the row weight and also
    accumulated into db_accum (the bias gradient).
    """
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef i64 t
    cdef floating m, s, val, winv
    cdef double w, tshift
    cdef floating* row
    cdef const floating* bp = &bias[0]
    cdef double* dbp = &db_accum[0]
    for i in range(n):
        w = weights[i]
        row = &logits[i, 0]
        if w == 0.0:
            for j in range(v):
                row[j] = 0
            nll_out[i] = 0.0
            continue
        t = targets[i]
        m = row[0] + bp[0]
        for j in range(1, v):
            val = row[j] + bp[j]
            if val > m:
                m = val
        tshift = <double>(row[t] + bp[t] - m)
        s = 0
        if floating is float:
            for j in range(v):
                val = expf(row[j] + bp[j] - m)
                row[j] = val
                s += val
        else:
            for j in range(v):
                val = exp(row[j] + bp[j] - m)
                row[j] = val
                s += val
        nll_out[i] = log(<double>s) - tshift
        winv = <floating>(w / <double>s)
        for j in range(v):
            val = row[j] * winv
            row[j] = val
            dbp[j] += <double>val
        row[t] -= <floating>w
        dbp[t] -= w
    return None


def rank_nll(const floating[:, ::1] logits, const i64[::1] targets):
    """Pessimistic target rank and NLL per row (ties count against)."""
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef i64 t, greater, equal
    cdef floating lt, m
    cdef double s
    cdef const floating* row
    ranks = np.empty(n, dtype=np.int64)
    nll = np.empty(n, dtype=np.float64)
    cdef i64[::1] rv = ranks
    cdef double[::1] nv = nll
    for i in range(n):
        row = &logits[i, 0]
        t = targets[i]
        lt = row[t]
        m = row[0]
        greater = 0
        equal = 0
        for j in range(v):
            if row[j] > m:
                m = row[j]
            if row[j] > lt:
                greater += 1
            elif row[j] == lt:
                equal += 1
        rv[i] = greater + equal  # self match contributes the final +1
        s = 0.0
        if floating is float:
            for j in range(v):
                s += expf(row[j] - m)
        else:
            for j in range(v):
                s += exp(row[j] - m)
        nv[i] = log(s) + <double>m - <double>lt
    return ranks, nll


def attn_softmax_fwd(floating[:, :, ::1] scores, const i64[::1] pads, double scale):
    """Masked softmax of (scale * scores) in place: query q sees keys
    [pad, q], or only itself when q < pad (left-padded slot)."""
    cdef Py_ssize_t R = scores.shape[0], T = scores.shape[1]
    cdef Py_ssize_t r, q, j, lo
    cdef floating m, s, val, inv, sc = <floating>scale
    cdef i64 p
    cdef floating* row
    for r in range(R):
        p = pads[r]
        for q in range(T):
            row = &scores[r, q, 0]
            lo = q if q < p else p
            m = row[lo]
            for j in range(lo + 1, q + 1):
                if row[j] > m:
                    m = row[j]
            s = 0
            if floating is float:
                for j in range(lo, q + 1):
                    val = expf((row[j] - m) * sc)
                    row[j] = val
                    s += val
            else:
                for j in range(lo, q + 1):
                    val = exp((row[j] - m) * sc)
                    row[j] = val
                    s += val
            inv = <floating>(1.0 / <double>s)
            for j in range(lo, q + 1):
                row[j] *= inv
            for j in range(0, lo):
                row[j] = 0
            for j in range(q + 1, T):
                row[j] = 0
    return None


def attn_softmax_bwd(const floating[:, :, ::1] probs, floating[:, :, ::1] dprobs,
                     const i64[::1] pads, double scale):
    """d(raw scores) = scale * P * (dP - sum_j dP_j P_j), zero outside the
    visible range."""
    cdef Py_ssize_t R = probs.shape[0], T = probs.shape[1]
    cdef Py_ssize_t r, q, j, lo
    cdef floating inner, sc = <floating>scale
    cdef i64 p
    cdef const floating* prow
    cdef floating* drow
    for r in range(R):
        p = pads[r]
        for q in range(T):
            prow = &probs[r, q, 0]
            drow = &dprobs[r, q, 0]
            lo = q if q < p else p
            inner = 0
            for j in range(lo, q + 1):
                inner += drow[j] * prow[j]
            for j in range(lo, q + 1):
                drow[j] = sc * prow[j] * (drow[j] - inner)
            for j in range(0, lo):
                drow[j] = 0
            for j in range(q + 1, T):
                drow[j] = 0
    return None


def ln_fwd(const floating[:, ::1] x, const floating[::1] g, const floating[::1] b,
           floating[:, ::1] y, floating[::1] mean, floating[::1] rstd, double eps):
    """Row layernorm: y = g * (x - mean) * rstd + b; caches mean and rstd."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef floating mu, var, r, xc
    cdef const floating* xr
    cdef floating* yr
    cdef const floating* gp = &g[0]
    cdef const floating* bp = &b[0]
    for i in range(n):
        xr = &x[i, 0]
        yr = &y[i, 0]
        mu = 0
        for j in range(d):
            mu += xr[j]
        mu /= d
        var = 0
        for j in range(d):
            xc = xr[j] - mu
            var += xc * xc
        var /= d
        r = <floating>(1.0 / sqrt(<double>var + eps))
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            yr[j] = gp[j] * ((xr[j] - mu) * r) + bp[j]
    return None


def ln_bwd(const floating[:, ::1] dy, const floating[:, ::1] x,
           const floating[::1] mean, const floating[::1] rstd, const floating[::1] g,
           floating[:, ::1] dx, double[::1] dg, double[::1] db):
    """Backward of ln_fwd. dx is written; dg/db are accumulated (caller
    zeroes them)."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef floating mu, r, xhat, dxh, m1, m2
    cdef const floating* xr
    cdef const floating* dyr
    cdef floating* dxr
    cdef const floating* gp = &g[0]
    cdef double* dgp = &dg[0]
    cdef double* dbp = &db[0]
    for i in range(n):
        xr = &x[i, 0]
        dyr = &dy[i, 0]
        dxr = &dx[i, 0]
        mu = mean[i]
        r = rstd[i]
        m1 = 0
        m2 = 0
        for j in range(d):
            xhat = (xr[j] - mu) * r
            dxh = dyr[j] * gp[j]
            m1 += dxh
            m2 += dxh * xhat
            dgp[j] += <double>(dyr[j] * xhat)
            dbp[j] += <double>dyr[j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (xr[j] - mu) * r
            dxh = dyr[j] * gp[j]
            dxr[j] = (dxh - m1 - xhat * m2) * r
    return None


def dropout_fwd(floating[::1] x, double p, u64 nonce):
    """Inverted dropout in place; the mask is a pure function of (nonce,
    flat index), so the backward pass replays it without storage."""
    cdef Py_ssize_t n = x.shape[0], i
    cdef floating scale = <floating>(1.0 / (1.0 - p))
    cdef u64 thr = <u64>(p * 16777216.0)
    cdef floating* xp = &x[0]
    for i in range(n):
        if (_splitmix64(nonce + <u64>i) >> 40) < thr:
            xp[i] = 0
        else:
            xp[i] *= scale
    return None


def dropout_bwd(const floating[::1] dy, floating[::1] out, double p, u64 nonce):
    cdef Py_ssize_t n = dy.shape[0], i
    cdef floating scale = <floating>(1.0 / (1.0 - p))
    cdef u64 thr = <u64>(p * 16777216.0)
    cdef const floating* dp = &dy[0]
    cdef floating* op = &out[0]
    for i in range(n):
        if (_splitmix64(nonce + <u64>i) >> 40) < thr:
            op[i] = 0
        else:
            op[i] = dp[i] * scale
    return None


cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


def gelu_fwd(x):
    out = np.empty_like(x)
    _gelu_fwd_flat(x.reshape(-1), out.reshape(-1))
    return out


def gelu_bwd(x, dy):
    out = np.empty_like(x)
    _gelu_bwd_flat(x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    return out


def _gelu_fwd_flat(const floating[::1] x, floating[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef floating v
    if floating is float:
        for i in range(n):
            v = x[i]
            out[i] = <float>0.5 * v * (<float>1.0 + tanhf(<float>GELU_C * (v + <float>GELU_A * v * v * v)))
    else:
        for i in range(n):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))


def _gelu_bwd_flat(const floating[::1] x, const floating[::1] dy, floating[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef floating v, t, local
    if floating is float:
        for i in range(n):
            v = x[i]
            t = tanhf(<float>GELU_C * (v + <float>GELU_A * v * v * v))
            local = <float>0.5 * (<float>1.0 + t) + <float>0.5 * v * (<float>1.0 - t * t) * <float>GELU_C * (<float>1.0 + <float>3.0 * <float>GELU_A * v * v)
            out[i] = dy[i] * local
    else:
        for i in range(n):
            v = x[i]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            out[i] = dy[i] * local
