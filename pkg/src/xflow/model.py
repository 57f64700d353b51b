"""Sequence classifiers over traffic units and their training loop.

Two backbones share one embedding scheme (byte lookup table or scalar RTT
projection, plus fixed sinusoidal position codes): a pre-norm transformer
encoder with masked mean pooling, and an MLP over the flattened embeddings.
Forward passes are built on the autodiff tape so the same code path serves
training, prediction and mask optimization.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .data import KIND_BYTES, KIND_RTT, VOCAB_SIZE, pad_truncate
from .errors import DivergenceError, ValidationError

ARCH_TRANSFORMER = "transformer"
ARCH_MLP = "mlp"

NEG_INF = -1e9  # additive logit that zeroes attention to absent keys


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int
    kind: str = KIND_BYTES
    arch: str = ARCH_TRANSFORMER
    max_len: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_hidden: int = 128
    dropout: float = 0.2
    unit_dropout: float = 0.0
    unit_dropout_style: str = "scale"   # "scale": zero the embedding; "absent": drop like padding
    pooling: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.kind not in (KIND_BYTES, KIND_RTT):
            raise ValidationError(f"unknown kind {self.kind!r}")
        if self.arch not in (ARCH_TRANSFORMER, ARCH_MLP):
            raise ValidationError(f"unknown arch {self.arch!r}")
        if self.d_model % self.n_heads != 0:
            raise ValidationError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.unit_dropout < 1.0:
            raise ValidationError("dropout rates must lie in [0, 1)")
        if self.unit_dropout_style not in ("scale", "absent"):
            raise ValidationError(f"unknown unit_dropout_style {self.unit_dropout_style!r}")
        if self.pooling != "mean":
            raise ValidationError("only mean pooling is supported")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown classifier config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int = 10


class ModelParams:
    """Named trainable tensors in a fixed order."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def checksum(self):
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def __getitem__(self, name):
        return self.tensors[name]


def param_shapes(config):
    """Canonical name -> shape map; also the checkpoint tensor order."""
    d, ff, c = config.d_model, config.ff_hidden, config.num_classes
    shapes = {}
    if config.kind == KIND_BYTES:
        shapes["embed"] = (VOCAB_SIZE, d)
    else:
        shapes["in_w"] = (d,)
        shapes["in_b"] = (d,)
    if config.arch == ARCH_TRANSFORMER:
        for i in range(config.n_layers):
            p = f"L{i}."
            shapes[p + "ln1_g"] = (d,)
            shapes[p + "ln1_b"] = (d,)
            for nm in ("wq", "wk", "wv", "wo"):
                shapes[p + nm] = (d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                shapes[p + nm] = (d,)
            shapes[p + "ln2_g"] = (d,)
            shapes[p + "ln2_b"] = (d,)
            shapes[p + "w1"] = (d, ff)
            shapes[p + "b1"] = (ff,)
            shapes[p + "w2"] = (ff, d)
            shapes[p + "b2"] = (d,)
        head_in = d
    else:
        fan_in = config.max_len * d
        for i in range(config.n_layers):
            shapes[f"M{i}.w"] = (fan_in, ff)
            shapes[f"M{i}.b"] = (ff,)
            fan_in = ff
        head_in = fan_in
    shapes["head_w"] = (head_in, c)
    shapes["head_b"] = (c,)
    return shapes


def init_params(config):
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        base = name.split(".")[-1]
        if base.startswith("ln") and base.endswith("_g"):
            arr = np.ones(shape, np.float32)
        elif base.startswith(("b", "ln", "in_b")) or name == "head_b":
            arr = np.zeros(shape, np.float32)
        elif name == "embed":
            # content embeddings sized to match the O(1) position codes
            arr = rng.normal(0.0, 0.5, shape).astype(np.float32)
        elif name == "in_w":
            arr = rng.normal(0.0, 0.02, shape).astype(np.float32)
        elif len(shape) == 2:
            arr = rng.normal(0.0, np.sqrt(2.0 / (shape[0] + shape[1])), shape).astype(np.float32)
        else:
            arr = rng.normal(0.0, 0.02, shape).astype(np.float32)
        tensors[name] = arr
    if config.kind == KIND_BYTES:
        tensors["embed"][VOCAB_SIZE - 1] = 0.0  # pad row stays inert
    return ModelParams(tensors)


@functools.lru_cache(maxsize=8)
def _positional_encoding(max_len, d, dtype_name):
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return np.ascontiguousarray(enc.astype(np.dtype(dtype_name)))


def positional_encoding(max_len, d, dtype=np.float32):
    return _positional_encoding(max_len, d, np.dtype(dtype).name)


@dataclass
class PredictionDistribution:
    probs: np.ndarray
    predicted_class: int

    @classmethod
    def from_probs(cls, probs):
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs=probs, predicted_class=int(np.argmax(probs)))


@dataclass
class ForwardHooks:
    """Optional perturbations threaded through the encoder.

    unit_scale multiplies each position's input embedding (shape [B, L]);
    attn_bias is added to every layer's pre-softmax attention logits
    ([L, L] or [B, L, L]); attn_mul multiplies those logits ([L, L]) and
    exists for gradient probes.
    """

    unit_scale: object = None
    attn_bias: object = None
    attn_mul: object = None


@dataclass
class Batch:
    """Padded dense views of a list of sequences."""

    tokens: np.ndarray      # int64 [N, L] (bytes) or None
    values: np.ndarray      # float32 [N, L] (rtt) or None
    present: np.ndarray     # bool [N, L]
    labels: np.ndarray      # int64 [N]
    ids: list

    @classmethod
    def from_sequences(cls, seqs, config):
        if not seqs:
            raise ValidationError("empty batch")
        L = config.max_len
        n = len(seqs)
        present = np.zeros((n, L), dtype=bool)
        labels = np.empty(n, dtype=np.int64)
        ids = []
        if config.kind == KIND_BYTES:
            tokens = np.empty((n, L), dtype=np.int64)
            values = None
        else:
            tokens = None
            values = np.empty((n, L), dtype=np.float32)
        for i, s in enumerate(seqs):
            if s.kind != config.kind:
                raise ValidationError(
                    f"sequence {s.id} has kind {s.kind!r} but the model expects {config.kind!r}")
            if len(s) != L:
                s = pad_truncate(s, L)
            if config.kind == KIND_BYTES:
                tokens[i] = s.units
            else:
                values[i] = s.units.astype(np.float32)
            present[i] = s.present
            labels[i] = s.label_id
            ids.append(s.id)
        return cls(tokens=tokens, values=values, present=present, labels=labels, ids=ids)

    def __len__(self):
        return len(self.ids)


def _as_tensor(x, dtype):
    if x is None or isinstance(x, Tensor):
        return x
    return ad.constant(np.asarray(x, dtype=dtype))


def _dropout(x, rate, rng, dtype):
    mask = (rng.random(x.shape) >= rate).astype(dtype) / (1.0 - rate)
    return ad.mul(x, ad.constant(mask))


def _encoder_stack(x, present, pt, config, *, hooks, drop=0.0, rng=None, collect_attn=False):
    """Post-norm transformer blocks over input embeddings ``x`` [B, L, D].

    Post-norm keeps the first attention layer operating on the raw
    (possibly mask-scaled) embeddings; a per-position norm applied before
    attention would erase per-unit scaling entirely, since layer
    normalization is scale-invariant position by position. Absent
    positions are excluded from attention with an additive large negative
    logit; interaction hooks land on every layer's logits. Returns the
    contextual embeddings and any collected attention maps.
    """
    dtype = x.dtype
    n, L = present.shape
    present_f = present.astype(dtype)
    H = config.n_heads
    dh = config.d_model // H
    inv_sqrt = 1.0 / np.sqrt(dh)
    attn_weights = []

    pad_bias = None
    if not present.all():
        pad_bias = ad.constant(((1.0 - present_f) * NEG_INF)[:, None, None, :])

    attn_bias = _as_tensor(hooks.attn_bias, dtype)
    if attn_bias is not None:
        if attn_bias.data.shape[-2:] != (L, L):
            raise ValidationError(f"attention bias shape {attn_bias.data.shape} does not match L={L}")
        shape = (1, 1, L, L) if attn_bias.data.ndim == 2 else (attn_bias.data.shape[0], 1, L, L)
        attn_bias = ad.reshape(attn_bias, shape)
    attn_mul = _as_tensor(hooks.attn_mul, dtype)
    if attn_mul is not None:
        if attn_mul.data.shape != (L, L):
            raise ValidationError(f"attention multiplier shape {attn_mul.data.shape} does not match L={L}")
        attn_mul = ad.reshape(attn_mul, (1, 1, L, L))

    def heads(t):
        return ad.transpose(ad.reshape(t, (n, L, H, dh)), (0, 2, 1, 3))

    bias = None
    if attn_bias is not None and pad_bias is not None:
        bias = ad.add(attn_bias, pad_bias.data)
    elif attn_bias is not None:
        bias = attn_bias
    elif pad_bias is not None:
        bias = pad_bias.data

    for i in range(config.n_layers):
        p = f"L{i}."
        q = heads(ad.linear(x, pt[p + "wq"], pt[p + "bq"]))
        k = heads(ad.linear(x, pt[p + "wk"], pt[p + "bk"]))
        v = heads(ad.linear(x, pt[p + "wv"], pt[p + "bv"]))
        if attn_mul is None:
            ctx, a = ad.attention(q, k, v, inv_sqrt, bias=bias)
        else:
            # composed path so the multiplicative logit probe stays differentiable
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
            scores = ad.mul(scores, attn_mul)
            if bias is not None:
                scores = ad.add(scores, bias)
            att = ad.softmax(scores)
            ctx, a = ad.matmul(att, v), att.data
        if collect_attn:
            attn_weights.append(a)
        o = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, L, config.d_model))
        o = ad.linear(o, pt[p + "wo"], pt[p + "bo"])
        if drop:
            o = _dropout(o, drop, rng, dtype)
        x = ad.layer_norm(ad.add(x, o), pt[p + "ln1_g"], pt[p + "ln1_b"])
        f = ad.linear(ad.relu(ad.linear(x, pt[p + "w1"], pt[p + "b1"])), pt[p + "w2"], pt[p + "b2"])
        if drop:
            f = _dropout(f, drop, rng, dtype)
        x = ad.layer_norm(ad.add(x, f), pt[p + "ln2_g"], pt[p + "ln2_b"])
    return x, attn_weights


def _anchored(present):
    """Presence with position 0 forced on for fully-absent rows, so pooling
    stays defined for degenerate (fully removed) perturbations."""
    empty = ~present.any(axis=1)
    if not empty.any():
        return present
    present = present.copy()
    present[empty, 0] = True
    return present


def build_graph(batch, pt, config, *, hooks=None, train=False, rng=None,
                collect_attn=False, embed_leaf=False):
    """Assemble the forward computation for one dense batch.

    ``pt`` is the name -> Tensor mapping of model weights. Returns
    (logits Tensor, embeddings Tensor, list of attention weight arrays).
    """
    dtype = pt["head_w"].dtype
    n, L = batch.present.shape
    raw_present = batch.present
    unit_keep = None
    if train and config.unit_dropout:
        # whole-unit dropout forces the model to spread reliance over
        # redundant evidence; the per-instance rate is drawn uniformly up
        # to the configured maximum so the model sees every masking
        # density it will later be probed with. "scale" zeroes the unit's
        # embedding exactly like a hard importance mask, "absent" drops it
        # like padding.
        rate = rng.random((n, 1)) * config.unit_dropout
        keep = rng.random((n, L)) >= rate
        if config.unit_dropout_style == "absent":
            raw_present = raw_present & keep
        else:
            unit_keep = keep.astype(dtype)
    batch_present = _anchored(raw_present)
    pos = positional_encoding(L, config.d_model, dtype)
    if config.kind == KIND_BYTES:
        if batch.tokens.max() >= VOCAB_SIZE:
            raise ValidationError("byte token out of vocabulary")
        content = ad.take(pt["embed"], batch.tokens)
    else:
        vals = ad.constant(batch.values.astype(dtype)[:, :, None])
        content = ad.add(ad.mul(vals, pt["in_w"]), pt["in_b"])
    x = ad.add(content, ad.constant(pos))
    if embed_leaf:
        x = Tensor(x.data, requires_grad=True)
    embed = x

    hooks = hooks or ForwardHooks()
    if hooks.unit_scale is not None:
        scale = _as_tensor(hooks.unit_scale, dtype)
        x = ad.mul(x, ad.reshape(scale, (*scale.shape, 1)))
    if unit_keep is not None:
        x = ad.mul(x, ad.constant(unit_keep[:, :, None]))

    present_f = batch_present.astype(dtype)
    drop = config.dropout if train else 0.0

    if config.arch == ARCH_MLP:
        if hooks.attn_bias is not None or hooks.attn_mul is not None:
            raise ValidationError("attention hooks are undefined for the MLP backbone")
        x = ad.mul(x, ad.constant(raw_present.astype(dtype)[:, :, None]))
        h = ad.reshape(x, (n, L * config.d_model))
        for i in range(config.n_layers):
            h = ad.relu(ad.linear(h, pt[f"M{i}.w"], pt[f"M{i}.b"]))
            if drop:
                h = _dropout(h, drop, rng, dtype)
        logits = ad.linear(h, pt["head_w"], pt["head_b"])
        return logits, embed, []

    x, attn_weights = _encoder_stack(x, batch_present, pt, config, hooks=hooks,
                                     drop=drop, rng=rng, collect_attn=collect_attn)
    pooled = ad.masked_mean(x, present_f)
    logits = ad.linear(pooled, pt["head_w"], pt["head_b"])
    return logits, embed, attn_weights


def wrap_params(params, trainable=False):
    return {k: Tensor(v, requires_grad=trainable) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def predict_logits(batch, params, config, hooks=None, chunk=512):
    """Raw logits for a dense batch, chunked so results never depend on the
    caller's batching."""
    pt = wrap_params(params, trainable=False)
    out = []
    for s in range(0, len(batch), chunk):
        sub = Batch(tokens=None if batch.tokens is None else batch.tokens[s:s + chunk],
                    values=None if batch.values is None else batch.values[s:s + chunk],
                    present=batch.present[s:s + chunk],
                    labels=batch.labels[s:s + chunk], ids=batch.ids[s:s + chunk])
        sub_hooks = hooks
        if hooks is not None and hooks.unit_scale is not None and \
                np.asarray(hooks.unit_scale).ndim == 2 and len(batch) != len(sub):
            scale = np.asarray(hooks.unit_scale)[s:s + chunk]
            sub_hooks = ForwardHooks(unit_scale=scale, attn_bias=hooks.attn_bias,
                                     attn_mul=hooks.attn_mul)
        logits, _, _ = build_graph(sub, pt, config, hooks=sub_hooks)
        out.append(logits.data)
    return np.concatenate(out, axis=0)


def predict_probs(batch, params, config, hooks=None):
    logits = predict_logits(batch, params, config, hooks=hooks)
    return kernels.softmax_rows(np.ascontiguousarray(logits))


def predict_batch(sequences, params, config):
    """Order-preserving per-sequence class distributions (dropout off)."""
    batch = Batch.from_sequences(sequences, config)
    probs = predict_probs(batch, params, config)
    return [PredictionDistribution.from_probs(p) for p in probs]


def accuracy(probs, labels):
    return float((probs.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# public single-sequence views of the pipeline stages
# ---------------------------------------------------------------------------

def embed_units(seq, params, config):
    """Unit embeddings plus position codes for one padded sequence."""
    if len(seq) != config.max_len:
        raise ValidationError("sequence must be padded to max_len first")
    batch = Batch.from_sequences([seq], config)
    pt = wrap_params(params)
    _, embed, _ = build_graph(batch, pt, config)
    return embed.data[0]


def encode(embeddings, present, params, config, hooks=None):
    """Run the encoder stack over precomputed input embeddings for one
    sequence; with zero layers the embeddings pass through unchanged."""
    if config.arch != ARCH_TRANSFORMER:
        raise ValidationError("encode applies to the transformer backbone")
    present = np.asarray(present, dtype=bool)[None]
    pt = wrap_params(params)
    dtype = pt["head_w"].dtype
    x = ad.constant(np.asarray(embeddings, dtype=dtype)[None])
    hooks = hooks or ForwardHooks()
    if hooks.unit_scale is not None:
        scale = _as_tensor(hooks.unit_scale, dtype)
        if scale.data.ndim == 1:
            scale = ad.reshape(scale, (1, *scale.data.shape))
        x = ad.mul(x, ad.reshape(scale, (*scale.data.shape, 1)))
    out, _ = _encoder_stack(x, present, pt, config, hooks=hooks)
    return out.data[0]


def pool_and_classify(hidden, present, params, config):
    """Masked mean pooling followed by the linear head and softmax."""
    present = np.asarray(present, dtype=bool)
    if not present.any():
        raise ValidationError("no present positions to pool over")
    pt = wrap_params(params)
    h = ad.constant(np.asarray(hidden, dtype=pt["head_w"].dtype)[None])
    pooled = ad.masked_mean(h, present.astype(h.dtype)[None])
    logits = ad.linear(pooled, pt["head_w"], pt["head_b"])
    probs = kernels.softmax_rows(np.ascontiguousarray(logits.data))
    return PredictionDistribution.from_probs(probs[0])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            kernels.adam_update(self.arrays[k].ravel(), np.ascontiguousarray(g, dtype=self.arrays[k].dtype).ravel(),
                                self.m[k].ravel(), self.v[k].ravel(),
                                self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)


def _epoch_eval(batch, params, config):
    logits = predict_logits(batch, params, config)
    lp = kernels.log_softmax_rows(np.ascontiguousarray(logits))
    loss = float(-lp[np.arange(len(batch)), batch.labels].mean())
    acc = accuracy(lp, batch.labels)
    return loss, acc


def train(ds, config, hyper=None):
    """Minimize mean cross-entropy with Adam; early-stop on validation
    accuracy and return the best-validation parameters plus the log."""
    hyper = hyper or TrainConfig()
    if not ds.splits.get("train") or not ds.splits.get("val"):
        raise ValidationError("training requires non-empty train and val splits")
    train_batch = Batch.from_sequences(ds.split("train"), config)
    val_batch = Batch.from_sequences(ds.split("val"), config)
    params = init_params(config)
    best = params.copy()
    log = {"epochs": [], "best_epoch": 0, "stopped_early": False}
    if hyper.epochs == 0:
        return best, log
    rng = np.random.default_rng(hyper.seed)
    opt = Adam(params.tensors, hyper.learning_rate)
    best_acc = -1.0
    best_loss = np.inf
    stale = 0
    n = len(train_batch)
    for epoch in range(1, hyper.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, hyper.batch_size):
            take = perm[s:s + hyper.batch_size]
            sub = Batch(tokens=None if train_batch.tokens is None else train_batch.tokens[take],
                        values=None if train_batch.values is None else train_batch.values[take],
                        present=train_batch.present[take], labels=train_batch.labels[take],
                        ids=[train_batch.ids[i] for i in take])
            pt = wrap_params(params, trainable=True)
            logits, _, _ = build_graph(sub, pt, config, train=True, rng=rng)
            loss = ad.nll(ad.log_softmax(logits), sub.labels)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"training loss became non-finite at epoch {epoch}", step=epoch)
            loss.backward()
            opt.step({k: t.grad for k, t in pt.items()})
            losses.append(value)
        train_loss = float(np.mean(losses))
        val_loss, val_acc = _epoch_eval(val_batch, params, config)
        log["epochs"].append({"epoch": epoch, "train_loss": train_loss,
                              "val_loss": val_loss, "val_acc": val_acc})
        # patience counts epochs without an accuracy improvement; within an
        # accuracy plateau the lowest-val-loss parameters are kept
        if val_acc > best_acc or (val_acc == best_acc and val_loss < best_loss):
            best = params.copy()
            best_loss = val_loss
            log["best_epoch"] = epoch
        if val_acc > best_acc:
            best_acc = val_acc
            stale = 0
        else:
            stale += 1
            if hyper.patience and stale >= hyper.patience:
                log["stopped_early"] = True
                break
    return best, log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(params, config, dirpath):
    """Write manifest.json plus params.bin (little-endian float32,
    concatenated in manifest order)."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, arr in params.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "len": len(raw)})
        offset += len(raw)
        blobs.append(raw)
    manifest = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "tensors": entries}
    with open(os.path.join(dirpath, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(dirpath, "params.bin"), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(dirpath):
    """Validate the manifest against the declared config before touching the
    blob; returns (params, config)."""
    with open(os.path.join(dirpath, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"checkpoint version mismatch: {manifest.get('version')}")
    config = ClassifierConfig.from_dict(manifest["config"])
    expected = param_shapes(config)
    entries = manifest["tensors"]
    names = [e["name"] for e in entries]
    if names != list(expected):
        raise ValidationError("checkpoint tensor names do not match the config")
    offset = 0
    for e in entries:
        if tuple(e["shape"]) != expected[e["name"]]:
            raise ValidationError(f"tensor {e['name']} has shape {e['shape']}, "
                                  f"expected {list(expected[e['name']])}")
        if e["offset"] != offset or e["len"] != 4 * int(np.prod(e["shape"])):
            raise ValidationError(f"tensor {e['name']}: inconsistent offset/len")
        offset += e["len"]
    blob_path = os.path.join(dirpath, "params.bin")
    if os.path.getsize(blob_path) != offset:
        raise ValidationError("params.bin length does not match the manifest")
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    tensors = {}
    for e in entries:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"])),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()
    return ModelParams(tensors), config
