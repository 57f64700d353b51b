"""Learned sigmoid masks that explain classifier predictions.

A mask is an unconstrained score array ``theta``; its elementwise sigmoid is
the importance in [0, 1]. Unit-level masks scale input embeddings before
the first encoder layer; interaction-level masks add log-sigmoid scores to
every layer's attention logits, so pairwise importance stays constant
across depth. Scores index either sequence positions or byte values
(vocabulary of 257), and a mask may explain one instance or one predicted
class across many instances.

Optimization minimizes a weighted sum of an explanation loss (keeping the
masked prediction close to the original prediction, its predicted label,
or a class label across instances) and a hinge penalty on the L1 mass of
the mask above a budget, which forces sparse explanations.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .data import KIND_BYTES, VOCAB_SIZE
from .errors import DivergenceError, ValidationError
from .model import (Adam, Batch, ForwardHooks, PredictionDistribution,
                    build_graph, predict_probs, wrap_params)

LEVEL_UNIT = "unit"
LEVEL_INTERACTION = "interaction"
MODE_POSITIONAL = "positional"
MODE_VALUE = "value"
TARGET_LOCAL = "local"
TARGET_GLOBAL = "global"

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class MaskSpec:
    level: str = LEVEL_UNIT
    index_mode: str = MODE_POSITIONAL
    target: str = TARGET_LOCAL
    class_id: int = None

    def __post_init__(self):
        if self.level not in (LEVEL_UNIT, LEVEL_INTERACTION):
            raise ValidationError(f"unknown mask level {self.level!r}")
        if self.index_mode not in (MODE_POSITIONAL, MODE_VALUE):
            raise ValidationError(f"unknown index mode {self.index_mode!r}")
        if self.target not in (TARGET_LOCAL, TARGET_GLOBAL):
            raise ValidationError(f"unknown target {self.target!r}")
        if self.target == TARGET_GLOBAL and self.class_id is None:
            raise ValidationError("global masks need a class_id")

    def to_dict(self):
        return {"level": self.level, "index_mode": self.index_mode,
                "target": self.target, "class_id": self.class_id}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class MaskParams:
    """Unconstrained scores; sigmoid(theta) is the importance mask."""

    theta: np.ndarray

    @property
    def importance(self):
        return _sigmoid(self.theta)


@dataclass
class ExplainerConfig:
    objective: str = "label"          # "confidence" | "label" | "global"
    alpha1: float = 0.1
    alpha2: float = 1.0
    budget: float = None              # None -> topk_fraction * mask dimension
    steps: int = 300
    learning_rate: float = 0.1
    seed: int = 0
    topk_fraction: float = 0.05
    init: str = "zeros"               # "zeros" | "random"
    budget_warmup: float = 0.5        # fraction of steps over which alpha1 ramps in

    def __post_init__(self):
        if self.objective not in ("confidence", "label", "global"):
            raise ValidationError(f"unknown objective {self.objective!r}")
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha1 + self.alpha2 <= 0:
            raise ValidationError("alpha weights must be non-negative and not both zero")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ValidationError("topk_fraction must lie in (0, 1]")
        if not 0.0 <= self.budget_warmup < 1.0:
            raise ValidationError("budget_warmup must lie in [0, 1)")


@dataclass
class ExplanationReport:
    ids: list
    spec: MaskSpec
    method: str
    scores: np.ndarray
    topk: np.ndarray
    trace: list
    seconds: float
    objective: str = None
    meta: dict = field(default_factory=dict)

    def to_json_dict(self, include_timing=True, dense=True):
        doc = {
            "id": self.ids[0] if len(self.ids) == 1 else self.ids,
            "spec": self.spec.to_dict(),
            "method": self.method,
            "topk": self.topk.tolist(),
            "trace": [float(t) for t in self.trace],
            "seconds": float(self.seconds) if include_timing else None,
        }
        if self.spec.level == LEVEL_INTERACTION and not dense:
            doc["score_format"] = "sparse_topk"
            doc["scores"] = [[int(i), int(j), float(self.scores[i, j])] for i, j in self.topk]
            doc["score_dim"] = int(self.scores.shape[0])
        else:
            doc["score_format"] = "dense"
            doc["scores"] = np.asarray(self.scores, dtype=float).tolist()
        if self.objective:
            doc["objective"] = self.objective
        if self.meta:
            doc["meta"] = self.meta
        return doc


def report_from_json_dict(doc):
    """Rebuild a report from its serialized form. Sparse interaction score
    payloads are expanded into a zero-filled matrix and flagged in meta, so
    consumers know only the stored Top-K is meaningful."""
    spec = MaskSpec.from_dict(doc["spec"])
    raw = doc["scores"]
    meta = dict(doc.get("meta", {}))
    if doc.get("score_format") == "sparse_topk":
        n = int(doc["score_dim"])
        scores = np.zeros((n, n))
        for i, j, v in raw:
            scores[int(i), int(j)] = v
        meta["sparse"] = True
    else:
        scores = np.asarray(raw, dtype=np.float64)
    rid = doc["id"]
    return ExplanationReport(
        ids=[rid] if isinstance(rid, str) else list(rid),
        spec=spec, method=doc.get("method", "mask_optim"),
        scores=scores, topk=np.asarray(doc["topk"]),
        trace=list(doc.get("trace", [])),
        seconds=doc.get("seconds") or 0.0,
        objective=doc.get("objective"), meta=meta)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def derive_seed(global_seed, instance_id):
    """Scheduling-independent per-instance seed."""
    digest = hashlib.sha256(f"{global_seed}:{instance_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def mask_shape(spec, config):
    if spec.index_mode == MODE_VALUE:
        n = VOCAB_SIZE
    else:
        n = config.max_len
    return (n, n) if spec.level == LEVEL_INTERACTION else (n,)


def _check_kind(spec, config):
    if spec.index_mode == MODE_VALUE and config.kind != KIND_BYTES:
        raise ValidationError("value-indexed masks require byte sequences")


# ---------------------------------------------------------------------------
# masked prediction
# ---------------------------------------------------------------------------

def _hooks_from_theta(theta, spec, batch):
    """Numpy hooks for inference-time masked prediction."""
    L = batch.present.shape[1]
    if spec.level == LEVEL_UNIT:
        if spec.index_mode == MODE_POSITIONAL:
            scale = np.broadcast_to(_sigmoid(theta)[None, :], batch.present.shape)
        else:
            scale = _sigmoid(theta)[batch.tokens]
        return ForwardHooks(unit_scale=scale.astype(np.float32))
    if spec.index_mode == MODE_POSITIONAL:
        bias = _log_sigmoid(theta)
    else:
        tok = batch.tokens
        bias = _log_sigmoid(theta[tok[:, :, None], tok[:, None, :]])
    return ForwardHooks(attn_bias=bias.astype(np.float32))


def masked_predict(seq, params, config, mask, spec):
    """Class distribution after applying the mask; the model stays frozen."""
    theta = mask.theta if isinstance(mask, MaskParams) else np.asarray(mask)
    _check_kind(spec, config)
    if theta.shape != mask_shape(spec, config):
        raise ValidationError(f"mask shape {theta.shape} does not match spec "
                              f"{mask_shape(spec, config)}")
    batch = Batch.from_sequences([seq], config)
    probs = predict_probs(batch, params, config, hooks=_hooks_from_theta(theta, spec, batch))
    return PredictionDistribution.from_probs(probs[0])


def masked_predict_batch(seqs, params, config, mask, spec):
    theta = mask.theta if isinstance(mask, MaskParams) else np.asarray(mask)
    _check_kind(spec, config)
    batch = Batch.from_sequences(seqs, config)
    return predict_probs(batch, params, config, hooks=_hooks_from_theta(theta, spec, batch))


# ---------------------------------------------------------------------------
# objectives (scalar forms)
# ---------------------------------------------------------------------------

def objective_confidence(orig, masked):
    """Cross-entropy of the masked prediction against the full original
    predicted distribution (surrogate for the conditional entropy)."""
    o = orig.probs if isinstance(orig, PredictionDistribution) else np.asarray(orig, float)
    m = masked.probs if isinstance(masked, PredictionDistribution) else np.asarray(masked, float)
    return float(-(o * np.log(np.maximum(m, LOG_FLOOR))).sum())


def objective_label(masked, c):
    m = masked.probs if isinstance(masked, PredictionDistribution) else np.asarray(masked, float)
    return float(-np.log(max(m[c], LOG_FLOOR)))


def objective_global(masked_list, c):
    if len(masked_list) == 0:
        raise ValidationError("global objective over an empty instance set")
    return float(np.mean([objective_label(m, c) for m in masked_list]))


def mask_l1(theta, present=None):
    """L1 mass of the importance mask; for positional masks of one instance
    only present positions count (the mask covers the actual units)."""
    s = _sigmoid(theta)
    if present is not None:
        if s.ndim == 2:
            s = s * np.outer(present, present)
        else:
            s = s * present
    return float(s.sum())


def total_loss(explain_loss, mask, alpha1, alpha2, budget, present=None):
    theta = mask.theta if isinstance(mask, MaskParams) else np.asarray(mask)
    return alpha1 * max(0.0, mask_l1(theta, present) - budget) + alpha2 * explain_loss


# ---------------------------------------------------------------------------
# Top-K selection (single tie-break rule for every method)
# ---------------------------------------------------------------------------

def _round_half_up(x):
    return int(np.floor(x + 0.5))


def select_topk(scores, spec, f, present=None, effective_len=None, base=None):
    """Pick the K highest-scoring units or pairs.

    K = max(1, round(f * base)) with base = effective length for positional
    scores and the vocabulary size for value scores (squared at the
    interaction level); ``base`` overrides that default. Ties break toward
    the lower index; padded positions are never selected.
    """
    if not 0.0 < f <= 1.0:
        raise ValidationError("topk fraction must lie in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    if spec.level == LEVEL_UNIT:
        if spec.index_mode == MODE_POSITIONAL:
            cand = np.flatnonzero(present) if present is not None else np.arange(scores.shape[0])
            n_base = base if base is not None else (
                effective_len if effective_len is not None else cand.size)
        else:
            cand = np.arange(VOCAB_SIZE)
            n_base = base if base is not None else VOCAB_SIZE
        k = min(max(1, _round_half_up(f * n_base)), cand.size)
        vals = scores[cand]
        order = np.lexsort((cand, -vals))
        return cand[order[:k]]
    # interaction level: rank flattened pairs
    L = scores.shape[0]
    if spec.index_mode == MODE_POSITIONAL:
        if present is not None:
            mask = np.outer(present, present)
            flat_cand = np.flatnonzero(mask.ravel())
        else:
            flat_cand = np.arange(L * L)
        eff = effective_len if effective_len is not None else int(np.sqrt(flat_cand.size))
        n_base = base if base is not None else eff * eff
    else:
        flat_cand = np.arange(L * L)
        n_base = base if base is not None else VOCAB_SIZE * VOCAB_SIZE
    k = min(max(1, _round_half_up(f * n_base)), flat_cand.size)
    vals = scores.ravel()[flat_cand]
    order = np.lexsort((flat_cand, -vals))
    chosen = flat_cand[order[:k]]
    return np.stack([chosen // L, chosen % L], axis=1)


# ---------------------------------------------------------------------------
# mask optimization
# ---------------------------------------------------------------------------

def _tape_hooks(theta_t, spec, batch):
    if spec.level == LEVEL_UNIT:
        if spec.index_mode == MODE_POSITIONAL:
            scale = ad.reshape(ad.sigmoid(theta_t), (1, -1))
        else:
            scale = ad.sigmoid(ad.take(theta_t, batch.tokens))
        return ForwardHooks(unit_scale=scale)
    if spec.index_mode == MODE_POSITIONAL:
        bias = ad.log_sigmoid(theta_t)
    else:
        tok = batch.tokens
        rows = np.broadcast_to(tok[:, :, None], (tok.shape[0], tok.shape[1], tok.shape[1]))
        cols = np.broadcast_to(tok[:, None, :], rows.shape)
        bias = ad.log_sigmoid(ad.take_pairs(theta_t, rows, cols))
    return ForwardHooks(attn_bias=bias)


def _mass_term(theta_t, spec, batch):
    """Tape version of mask_l1 restricted to present positions for
    positional masks of a single instance."""
    s = ad.sigmoid(theta_t)
    if spec.index_mode == MODE_POSITIONAL and spec.target == TARGET_LOCAL:
        present = batch.present[0].astype(theta_t.dtype)
        w = np.outer(present, present) if spec.level == LEVEL_INTERACTION else present
        s = ad.mul(s, ad.constant(w))
    return ad.tsum(s)


def _mask_dim(spec, batch, config):
    if spec.index_mode == MODE_VALUE:
        n = VOCAB_SIZE
    elif spec.target == TARGET_LOCAL:
        n = int(batch.present[0].sum())
    else:
        n = config.max_len
    return n * n if spec.level == LEVEL_INTERACTION else n


def explain_loss_tensor(logp, objective, orig_probs, labels):
    if objective == "confidence":
        weighted = ad.mul(logp, ad.constant(orig_probs.astype(logp.dtype)))
        return ad.mul(ad.tsum(weighted), -1.0 / logp.data.shape[0])
    return ad.nll(logp, labels)


def optimize_mask(seqs, params, config, spec, xcfg, orig=None):
    """Gradient-optimize a mask for one instance (local) or an instance set
    (global); the classifier is frozen and verified unchanged. Returns a
    report with the final importance scores, Top-K selection and the
    objective trace."""
    single = not isinstance(seqs, (list, tuple))
    seqs = [seqs] if single else list(seqs)
    if not seqs:
        raise ValidationError("no instances to explain")
    _check_kind(spec, config)
    if spec.target == TARGET_GLOBAL and xcfg.objective != "global":
        raise ValidationError("global masks use the global objective")
    if spec.target == TARGET_LOCAL and xcfg.objective == "global":
        raise ValidationError("the global objective needs a global mask spec")
    if spec.target == TARGET_LOCAL and len(seqs) != 1:
        raise ValidationError("a local mask explains exactly one instance")

    checksum = params.checksum()
    batch = Batch.from_sequences(seqs, config)
    if orig is None:
        orig_probs = predict_probs(batch, params, config)
    else:
        orig = [orig] if isinstance(orig, PredictionDistribution) else list(orig)
        orig_probs = np.stack([o.probs for o in orig]).astype(np.float32)
    if xcfg.objective == "label":
        targets = orig_probs.argmax(axis=1)
    elif xcfg.objective == "global":
        targets = np.full(len(seqs), spec.class_id, dtype=np.int64)
    else:
        targets = None

    shape = mask_shape(spec, config)
    if xcfg.init == "random":
        theta = np.random.default_rng(xcfg.seed).normal(0.0, 0.1, shape).astype(np.float32)
    else:
        theta = np.zeros(shape, dtype=np.float32)
    budget = xcfg.budget if xcfg.budget is not None else \
        xcfg.topk_fraction * _mask_dim(spec, batch, config)

    pt = wrap_params(params, trainable=False)
    opt = Adam({"theta": theta}, xcfg.learning_rate)
    trace = []
    # ramping the budget weight in lets every informative unit rise before
    # sparsity pressure starts pruning, which avoids freezing into a
    # partial support whose masked prediction is already perfect
    ramp = int(xcfg.steps * xcfg.budget_warmup)
    t0 = time.perf_counter()
    for step in range(xcfg.steps):
        a1 = xcfg.alpha1 if ramp == 0 else xcfg.alpha1 * min(1.0, step / ramp)
        theta_t = Tensor(theta, requires_grad=True)
        hooks = _tape_hooks(theta_t, spec, batch)
        logits, _, _ = build_graph(batch, pt, config, hooks=hooks)
        logp = ad.log_softmax(logits)
        explain = explain_loss_tensor(logp, xcfg.objective, orig_probs, targets)
        over = ad.relu(ad.add(_mass_term(theta_t, spec, batch), -budget))
        loss = ad.add(ad.mul(over, a1), ad.mul(explain, xcfg.alpha2))
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"mask objective became non-finite at step {step}", step=step)
        trace.append(value)
        loss.backward()
        opt.step({"theta": theta_t.grad})
    seconds = time.perf_counter() - t0
    if params.checksum() != checksum:
        raise RuntimeError("model parameters changed during mask optimization")

    scores = _sigmoid(theta)
    present = batch.present[0] if spec.target == TARGET_LOCAL and \
        spec.index_mode == MODE_POSITIONAL else None
    topk = select_topk(scores, spec, xcfg.topk_fraction, present=present,
                       effective_len=int(batch.present[0].sum()) if present is not None else None)
    return ExplanationReport(
        ids=batch.ids, spec=spec, method="mask_optim", scores=scores, topk=topk,
        trace=trace, seconds=seconds, objective=xcfg.objective,
        meta={"budget": budget, "steps": xcfg.steps,
              "final_mass": mask_l1(theta, present.astype(np.float64) if present is not None else None)})


def instances_predicted_as(seqs, params, config, class_id):
    """Filter a sequence list down to those the model assigns to class_id."""
    batch = Batch.from_sequences(seqs, config)
    pred = predict_probs(batch, params, config).argmax(axis=1)
    return [s for s, p in zip(seqs, pred) if p == class_id]
