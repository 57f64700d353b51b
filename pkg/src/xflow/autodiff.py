"""Reverse-mode differentiation over dense numpy arrays.

Define-by-run: every operation returns a new :class:`Tensor` holding the
value plus a closure that routes upstream gradients to its parents.
``Tensor.backward()`` replays those closures in reverse creation order.
The primitive set is exactly what the sequence classifier and the mask
optimizer need; float32 is used for training/explaining and float64 for
gradient checking.

Set ``XFLOW_DEBUG_NUMERICS=1`` to assert finiteness after every primitive.
"""

from __future__ import annotations

import os

import numpy as np

from . import kernels

DEBUG_NUMERICS = os.environ.get("XFLOW_DEBUG_NUMERICS", "") not in ("", "0")

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not fit a primitive."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' x '.join(str(s) for s in shapes)}")


def _dbg(arr, op):
    if DEBUG_NUMERICS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: non-finite output")


_COUNTER = 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False):
        global _COUNTER
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        _COUNTER += 1
        self._id = _COUNTER

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward", self.shape)
        # every tensor is created after its parents, so reverse creation
        # order over the reachable subgraph is a valid replay order
        nodes = []
        seen = {id(self)}
        stack = [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda n: n._id, reverse=True)
        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data):
    return Tensor(data, requires_grad=False)


def _wrap(out_data, parents, backward):
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _acc(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcast primitives
# ---------------------------------------------------------------------------

def add(a, b):
    if not isinstance(b, Tensor):
        if np.isscalar(b):
            data = a.data + b
            _dbg(data, "add")
            return _wrap(data, (a,), lambda g: _acc(a, g))
        b = constant(np.asarray(b, dtype=a.dtype))
    data = a.data + b.data
    _dbg(data, "add")

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _wrap(data, (a, b), bwd)


def mul(a, b):
    if not isinstance(b, Tensor):
        if np.isscalar(b):
            data = a.data * b
            _dbg(data, "mul")
            return _wrap(data, (a,), lambda g: _acc(a, g * b))
        b = constant(np.asarray(b, dtype=a.dtype))
    data = a.data * b.data
    _dbg(data, "mul")

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _wrap(data, (a, b), bwd)


def relu(x):
    data = np.maximum(x.data, 0)

    def bwd(g):
        _acc(x, g * (x.data > 0))

    return _wrap(data, (x,), bwd)


def sigmoid(x):
    # tanh form avoids exp overflow for large |x|
    data = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    _dbg(data, "sigmoid")

    def bwd(g):
        _acc(x, g * data * (1.0 - data))

    return _wrap(data, (x,), bwd)


def log_sigmoid(x):
    # -softplus(-x), stable on both tails
    data = -np.logaddexp(0.0, -x.data)
    _dbg(data, "log_sigmoid")

    def bwd(g):
        _acc(x, g * (0.5 * (1.0 - np.tanh(0.5 * x.data))))

    return _wrap(data, (x,), bwd)


def safe_log(x, floor=LOG_FLOOR):
    clipped = np.maximum(x.data, floor)
    data = np.log(clipped)

    def bwd(g):
        _acc(x, g * (x.data > floor) / clipped)

    return _wrap(data, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    data = np.matmul(a.data, b.data)
    _dbg(data, "matmul")

    if b.data.ndim == 2 and a.data.ndim > 2:
        def bwd(g):
            if a.requires_grad:
                _acc(a, np.matmul(g, b.data.T))
            if b.requires_grad:
                k = a.data.shape[-1]
                _acc(b, np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1])))
    else:
        def bwd(g):
            if a.requires_grad:
                _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
            if b.requires_grad:
                _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _wrap(data, (a, b), bwd)


def linear(x, w, b):
    """x @ w + bias; the bias broadcasts over leading axes."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# row-structured primitives backed by the kernels module
# ---------------------------------------------------------------------------

def softmax(x):
    n = x.data.shape[-1]
    rows = np.ascontiguousarray(x.data.reshape(-1, n))
    y = kernels.softmax_rows(rows)
    data = y.reshape(x.data.shape)
    _dbg(data, "softmax")

    def bwd(g):
        dx = kernels.softmax_rows_grad(y, np.ascontiguousarray(g.reshape(-1, n)))
        _acc(x, dx.reshape(x.data.shape))

    return _wrap(data, (x,), bwd)


def log_softmax(x):
    n = x.data.shape[-1]
    rows = np.ascontiguousarray(x.data.reshape(-1, n))
    lp = kernels.log_softmax_rows(rows)
    data = lp.reshape(x.data.shape)
    _dbg(data, "log_softmax")

    def bwd(g):
        dx = kernels.log_softmax_rows_grad(lp, np.ascontiguousarray(g.reshape(-1, n)))
        _acc(x, dx.reshape(x.data.shape))

    return _wrap(data, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError("layer_norm", x.data.shape, gain.data.shape, bias.data.shape)
    rows = np.ascontiguousarray(x.data.reshape(-1, n))
    out, xhat, inv = kernels.layernorm_rows(rows, gain.data, bias.data, eps)
    data = out.reshape(x.data.shape)
    _dbg(data, "layer_norm")

    def bwd(g):
        dx, dgain, dbias = kernels.layernorm_rows_grad(
            xhat, inv, gain.data, np.ascontiguousarray(g.reshape(-1, n)))
        _acc(x, dx.reshape(x.data.shape))
        _acc(gain, dgain)
        _acc(bias, dbias)

    return _wrap(data, (x, gain, bias), bwd)


def attention(q, k, v, scale, bias=None):
    """Fused scaled dot-product attention over [B, H, L, Dh] tensors.

    ``bias`` is added to the pre-softmax logits and may broadcast (pad
    exclusion, pairwise importance); gradients flow to q/k/v and to a
    Tensor bias. Returns (context, attention weights as a plain array).
    """
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise ShapeError("attention", q.data.shape, k.data.shape, v.data.shape)
    bias_t = bias if isinstance(bias, Tensor) else None
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= scale
    if bias is not None:
        scores = scores + (bias.data if bias_t is not None else bias)
    L = scores.shape[-1]
    a = kernels.softmax_rows(np.ascontiguousarray(scores.reshape(-1, L))).reshape(scores.shape)
    data = np.matmul(a, v.data)
    _dbg(data, "attention")

    parents = (q, k, v) + ((bias_t,) if bias_t is not None else ())

    def bwd(g):
        if v.requires_grad:
            _acc(v, np.matmul(np.swapaxes(a, -1, -2), g))
        da = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = kernels.softmax_rows_grad(np.ascontiguousarray(a.reshape(-1, L)),
                                       np.ascontiguousarray(da.reshape(-1, L))).reshape(a.shape)
        if bias_t is not None:
            _acc(bias_t, _unbroadcast(ds, bias_t.data.shape))
        if q.requires_grad:
            _acc(q, np.matmul(ds, k.data) * scale)
        if k.requires_grad:
            _acc(k, np.matmul(np.swapaxes(ds, -1, -2), q.data) * scale)

    out = _wrap(data, parents, bwd)
    return out, a


def masked_mean(x, flags):
    """Mean of x[b, l, :] over positions with flags[b, l] = 1."""
    if x.data.ndim != 3 or flags.shape != x.data.shape[:2]:
        raise ShapeError("masked_mean", x.data.shape, flags.shape)
    counts = flags.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("masked_mean: a sequence has zero present positions")
    w = (flags / counts[:, None]).astype(x.dtype)
    data = np.einsum("bld,bl->bd", x.data, w)
    _dbg(data, "masked_mean")

    def bwd(g):
        _acc(x, g[:, None, :] * w[:, :, None])

    return _wrap(data, (x,), bwd)


# ---------------------------------------------------------------------------
# gathers
# ---------------------------------------------------------------------------

def take(table, idx):
    """Fancy-index the first axis: rows of an embedding matrix or entries
    of a score vector."""
    idx = np.asarray(idx)
    data = table.data[idx]

    def bwd(g):
        dt = np.zeros_like(table.data)
        if table.data.ndim == 2:
            d = table.data.shape[1]
            kernels.scatter_add_rows(dt, idx.ravel().astype(np.int64),
                                     np.ascontiguousarray(g.reshape(-1, d)))
        else:
            kernels.scatter_add_1d(dt, idx.ravel().astype(np.int64),
                                   np.ascontiguousarray(g.ravel()))
        _acc(table, dt)

    return _wrap(data, (table,), bwd)


def take_pairs(table, rows, cols):
    """table[rows, cols] for a 2-d table; used by pairwise score masks."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    data = table.data[rows, cols]

    def bwd(g):
        dt = np.zeros_like(table.data)
        kernels.scatter_add_pairs(dt, rows.ravel().astype(np.int64),
                                  cols.ravel().astype(np.int64),
                                  np.ascontiguousarray(g.ravel()))
        _acc(table, dt)

    return _wrap(data, (table,), bwd)


# ---------------------------------------------------------------------------
# reductions / movement
# ---------------------------------------------------------------------------

def nll(logp, labels):
    """Mean negative log-likelihood of the given class indices."""
    labels = np.asarray(labels)
    if logp.data.ndim != 2 or labels.shape != (logp.data.shape[0],):
        raise ShapeError("nll", logp.data.shape, labels.shape)
    n = labels.shape[0]
    picked = logp.data[np.arange(n), labels]
    data = np.asarray(-picked.mean())

    def bwd(g):
        dl = np.zeros_like(logp.data)
        dl[np.arange(n), labels] = -g / n
        _acc(logp, dl)

    return _wrap(data, (logp,), bwd)


def tsum(x):
    data = np.asarray(x.data.sum())

    def bwd(g):
        _acc(x, np.broadcast_to(g, x.data.shape))

    return _wrap(data, (x,), bwd)


def tmean(x):
    return mul(tsum(x), 1.0 / x.data.size)


def reshape(x, shape):
    data = x.data.reshape(shape)

    def bwd(g):
        _acc(x, g.reshape(x.data.shape))

    return _wrap(data, (x,), bwd)


def transpose(x, axes):
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _acc(x, np.transpose(g, inv))

    return _wrap(data, (x,), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_check(build, leaves, step=1e-5, max_coords=24, seed=0, atol=1e-9):
    """Compare analytic gradients against central differences.

    ``build`` maps the leaf tensors to a scalar Tensor and is re-evaluated
    with perturbed leaf entries; for large leaves a seeded sample of
    coordinates is checked. Returns the worst relative error
    |analytic - numeric| / max(1e-12, |numeric|); disagreements below
    ``atol`` count as zero, since central differences cannot resolve a
    truly-zero gradient from float cancellation noise (~1e-10 at these
    steps).
    """
    for leaf in leaves:
        leaf.zero_grad()
    out = build(*leaves)
    if out.data.size != 1:
        raise ShapeError("finite_difference_check", out.shape)
    out.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        aflat = ana.reshape(-1)
        size = flat.shape[0]
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_hi = float(build(*leaves).data)
            flat[c] = orig - step
            f_lo = float(build(*leaves).data)
            flat[c] = orig
            numeric = (f_hi - f_lo) / (2.0 * step)
            diff = abs(aflat[c] - numeric)
            if diff <= atol:
                continue
            err = diff / max(1e-12, abs(numeric))
            if err > worst:
                worst = err
    return worst
