"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time: numba when it is installed and
the environment variable ``XFLOW_NO_NUMBA`` is unset/empty, numpy otherwise.
Both implementations of every kernel stay importable (``np_*`` / ``nb_*``)
so the benchmark suite can compare them directly.

All kernels operate on 2-d row views (callers reshape); they are
single-threaded on purpose so results are reproducible run to run.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "softmax_rows",
    "softmax_rows_grad",
    "log_softmax_rows",
    "log_softmax_rows_grad",
    "layernorm_rows",
    "layernorm_rows_grad",
    "scatter_add_rows",
    "scatter_add_1d",
    "scatter_add_pairs",
    "adam_update",
]

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via XFLOW_NO_NUMBA instead
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def np_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_rows_grad(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return (g - dot) * y


def np_log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def np_log_softmax_rows_grad(lp, g):
    return g - np.exp(lp) * g.sum(axis=1, keepdims=True)


def np_layernorm_rows(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def np_layernorm_rows_grad(xhat, inv, gain, g):
    n = xhat.shape[1]
    gg = g * gain
    m1 = gg.mean(axis=1, keepdims=True)
    m2 = (gg * xhat).mean(axis=1, keepdims=True)
    dx = (gg - m1 - xhat * m2) * inv[:, None]
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    return dx, dgain, dbias


def np_scatter_add_rows(out, idx, src):
    np.add.at(out, idx, src)


def np_scatter_add_1d(out, idx, src):
    np.add.at(out, idx, src)


def np_scatter_add_pairs(out, rows, cols, src):
    np.add.at(out, (rows, cols), src)


def np_adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# numba implementations (same loop order as numpy so results agree closely)
# ---------------------------------------------------------------------------

@njit(cache=True)
def nb_softmax_rows(x):
    r, c = x.shape
    out = np.empty_like(x)
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = np.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(c):
            out[i, j] *= inv
    return out


@njit(cache=True)
def nb_softmax_rows_grad(y, g):
    r, c = y.shape
    dx = np.empty_like(y)
    for i in range(r):
        dot = 0.0
        for j in range(c):
            dot += g[i, j] * y[i, j]
        for j in range(c):
            dx[i, j] = (g[i, j] - dot) * y[i, j]
    return dx


@njit(cache=True)
def nb_log_softmax_rows(x):
    r, c = x.shape
    out = np.empty_like(x)
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            s += np.exp(x[i, j] - m)
        lse = m + np.log(s)
        for j in range(c):
            out[i, j] = x[i, j] - lse
    return out


@njit(cache=True)
def nb_log_softmax_rows_grad(lp, g):
    r, c = lp.shape
    dx = np.empty_like(lp)
    for i in range(r):
        s = 0.0
        for j in range(c):
            s += g[i, j]
        for j in range(c):
            dx[i, j] = g[i, j] - np.exp(lp[i, j]) * s
    return dx


@njit(cache=True)
def nb_layernorm_rows(x, gain, bias, eps):
    r, c = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(r, x.dtype)
    for i in range(r):
        mu = 0.0
        for j in range(c):
            mu += x[i, j]
        mu /= c
        var = 0.0
        for j in range(c):
            d = x[i, j] - mu
            var += d * d
        var /= c
        iv = 1.0 / np.sqrt(var + eps)
        inv[i] = iv
        for j in range(c):
            h = (x[i, j] - mu) * iv
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return out, xhat, inv


@njit(cache=True)
def nb_layernorm_rows_grad(xhat, inv, gain, g):
    r, c = xhat.shape
    dx = np.empty_like(xhat)
    dgain = np.zeros(c, xhat.dtype)
    dbias = np.zeros(c, xhat.dtype)
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            gg = g[i, j] * gain[j]
            m1 += gg
            m2 += gg * xhat[i, j]
        m1 /= c
        m2 /= c
        for j in range(c):
            gg = g[i, j] * gain[j]
            dx[i, j] = (gg - m1 - xhat[i, j] * m2) * inv[i]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
    return dx, dgain, dbias


@njit(cache=True)
def nb_scatter_add_rows(out, idx, src):
    n, d = src.shape
    for i in range(n):
        k = idx[i]
        for j in range(d):
            out[k, j] += src[i, j]


@njit(cache=True)
def nb_scatter_add_1d(out, idx, src):
    for i in range(idx.shape[0]):
        out[idx[i]] += src[i]


@njit(cache=True)
def nb_scatter_add_pairs(out, rows, cols, src):
    for i in range(rows.shape[0]):
        out[rows[i], cols[i]] += src[i]


@njit(cache=True)
def nb_adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_want_numba = HAS_NUMBA and os.environ.get("XFLOW_NO_NUMBA", "") in ("", "0")
BACKEND = "numba" if _want_numba else "numpy"

if _want_numba:
    softmax_rows = nb_softmax_rows
    softmax_rows_grad = nb_softmax_rows_grad
    log_softmax_rows = nb_log_softmax_rows
    log_softmax_rows_grad = nb_log_softmax_rows_grad
    layernorm_rows = nb_layernorm_rows
    layernorm_rows_grad = nb_layernorm_rows_grad
    scatter_add_rows = nb_scatter_add_rows
    scatter_add_1d = nb_scatter_add_1d
    scatter_add_pairs = nb_scatter_add_pairs
    adam_update = nb_adam_update
else:
    softmax_rows = np_softmax_rows
    softmax_rows_grad = np_softmax_rows_grad
    log_softmax_rows = np_log_softmax_rows
    log_softmax_rows_grad = np_log_softmax_rows_grad
    layernorm_rows = np_layernorm_rows
    layernorm_rows_grad = np_layernorm_rows_grad
    scatter_add_rows = np_scatter_add_rows
    scatter_add_1d = np_scatter_add_1d
    scatter_add_pairs = np_scatter_add_pairs
    adam_update = np_adam_update


def warmup():
    """Trigger JIT compilation of every kernel on tiny inputs."""
    if BACKEND != "numba":
        return
    for dt in (np.float32, np.float64):
        x = np.ones((2, 3), dt)
        g = np.ones((2, 3), dt)
        y = softmax_rows(x)
        softmax_rows_grad(y, g)
        lp = log_softmax_rows(x)
        log_softmax_rows_grad(lp, g)
        out, xhat, inv = layernorm_rows(x, np.ones(3, dt), np.zeros(3, dt), 1e-5)
        layernorm_rows_grad(xhat, inv, np.ones(3, dt), g)
        acc = np.zeros((4, 3), dt)
        scatter_add_rows(acc, np.zeros(2, np.int64), g)
        scatter_add_1d(acc[:, 0], np.zeros(2, np.int64), g[:, 0].copy())
        scatter_add_pairs(acc, np.zeros(2, np.int64), np.ones(2, np.int64), g[:, 0].copy())
        p = np.ones(3, dt)
        adam_update(p, p.copy(), np.zeros(3, dt), np.zeros(3, dt), 0.1, 0.9, 0.999, 1e-8, 0.1, 0.001)
