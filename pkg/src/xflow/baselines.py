"""Comparison attribution methods emitting mask-shaped scores.

Each method produces scores in the same layout as the corresponding mask
spec, so the evaluation pipeline treats them interchangeably with the
optimized masks. "Removal" inside the sampling methods means pad/zero
substitution with the presence flag cleared, matching the evaluation
perturbations exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import KIND_BYTES, PAD_TOKEN, VOCAB_SIZE
from .errors import ValidationError
from .explain import (LEVEL_INTERACTION, LEVEL_UNIT, MODE_POSITIONAL,
                      MODE_VALUE, MaskSpec)
from .model import (ARCH_TRANSFORMER, Batch, ForwardHooks, build_graph,
                    predict_probs, wrap_params)

METHODS = ("random", "saliency", "self_attention", "lime", "shap", "mask_optim")


@dataclass
class AttributionScores:
    spec: MaskSpec
    scores: np.ndarray
    method: str
    ids: list
    seconds: float = 0.0
    meta: dict = field(default_factory=dict)


def _unit_spec_shape(seq, spec):
    if spec.index_mode == MODE_VALUE:
        n = VOCAB_SIZE
    else:
        n = len(seq)
    return (n, n) if spec.level == LEVEL_INTERACTION else (n,)


def random_attrib(seq, spec, seed=0):
    """Seeded i.i.d. uniform scores in the spec's shape."""
    rng = np.random.default_rng(seed)
    scores = rng.random(_unit_spec_shape(seq, spec))
    return AttributionScores(spec=spec, scores=scores, method="random", ids=[seq.id])


def saliency_attrib(seq, params, config, spec):
    """Gradient magnitudes of the predicted class log-probability.

    Unit scores are L2 norms of the gradient with respect to each input
    embedding; interaction scores are absolute gradients of a neutral
    multiplicative perturbation on the attention logits, accumulated over
    layers and heads.
    """
    t0 = time.perf_counter()
    batch = Batch.from_sequences([seq], config)
    pt = wrap_params(params, trainable=False)
    L = batch.present.shape[1]

    attn_mul = None
    if spec.level == LEVEL_INTERACTION:
        if config.arch != ARCH_TRANSFORMER:
            raise ValidationError("interaction saliency needs the transformer backbone")
        attn_mul = Tensor(np.ones((L, L), dtype=np.float32), requires_grad=True)
        logits, embed, _ = build_graph(batch, pt, config,
                                       hooks=ForwardHooks(attn_mul=attn_mul))
    else:
        logits, embed, _ = build_graph(batch, pt, config, embed_leaf=True)
    lp = ad.log_softmax(logits)
    pred = int(lp.data[0].argmax())
    target = ad.nll(lp, np.array([pred]))
    target.backward()

    if spec.level == LEVEL_UNIT:
        g = embed.grad[0] if embed.grad is not None else np.zeros_like(embed.data[0])
        per_pos = np.sqrt((g.astype(np.float64) ** 2).sum(axis=1))
        if spec.index_mode == MODE_POSITIONAL:
            scores = per_pos
        else:
            scores = np.zeros(VOCAB_SIZE)
            np.add.at(scores, batch.tokens[0][batch.present[0]], per_pos[batch.present[0]])
    else:
        g = attn_mul.grad if attn_mul.grad is not None else np.zeros((L, L), np.float32)
        mat = np.abs(g.astype(np.float64))
        if spec.index_mode == MODE_POSITIONAL:
            scores = mat
        else:
            scores = np.zeros((VOCAB_SIZE, VOCAB_SIZE))
            tok = batch.tokens[0]
            np.add.at(scores, (tok[:, None], tok[None, :]), mat)
    return AttributionScores(spec=spec, scores=scores, method="saliency", ids=[seq.id],
                             seconds=time.perf_counter() - t0)


def attention_attrib(seq, params, config):
    """Raw attention weights as pairwise importance: averaged over heads,
    summed over layers. Defined for the transformer backbone only."""
    if config.arch != ARCH_TRANSFORMER:
        raise ValidationError("attention attribution is undefined for the MLP backbone")
    t0 = time.perf_counter()
    batch = Batch.from_sequences([seq], config)
    pt = wrap_params(params, trainable=False)
    _, _, attns = build_graph(batch, pt, config, collect_attn=True)
    scores = sum(a[0].astype(np.float64).mean(axis=0) for a in attns)
    spec = MaskSpec(level=LEVEL_INTERACTION, index_mode=MODE_POSITIONAL)
    return AttributionScores(spec=spec, scores=scores, method="self_attention",
                             ids=[seq.id], seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# sampling surrogates
# ---------------------------------------------------------------------------

def _groups(seq, spec):
    """Perturbable coordinates: present positions, or byte values."""
    if spec.index_mode == MODE_POSITIONAL:
        return np.flatnonzero(seq.present)
    return np.arange(VOCAB_SIZE)


def _predict_dropped(seq, drop, params, config):
    """Class probabilities for many drop patterns of one sequence.

    ``drop`` is [n, L] boolean; dropped units are pad/zero substituted with
    presence cleared, and fully-dropped rows keep position 0 anchored.
    """
    n = drop.shape[0]
    present = np.broadcast_to(seq.present, drop.shape) & ~drop
    if config.kind == KIND_BYTES:
        tokens = np.where(drop, PAD_TOKEN, seq.units[None, :]).astype(np.int64)
        values = None
    else:
        tokens = None
        values = np.where(drop, 0.0, seq.units[None, :]).astype(np.float32)
    batch = Batch(tokens=tokens, values=values, present=present,
                  labels=np.zeros(n, np.int64), ids=[f"{seq.id}~{i}" for i in range(n)])
    return predict_probs(batch, params, config)


def _drop_from_keep(seq, groups, keep_bits, spec):
    """Expand kept-group bits [n, G] into per-position drop masks [n, L]."""
    n = keep_bits.shape[0]
    drop = np.zeros((n, len(seq)), dtype=bool)
    if spec.index_mode == MODE_POSITIONAL:
        drop[:, groups] = ~keep_bits
    else:
        keep_per_pos = keep_bits[:, seq.units]
        drop = np.broadcast_to(seq.present, (n, len(seq))) & ~keep_per_pos
    return drop & seq.present[None, :]


def lime_attrib(seq, params, config, spec, n_samples=1000, kernel_width=None, seed=0):
    """Weighted ridge surrogate fit on random keep/drop perturbations.

    Coefficients approximate each unit's (or byte value's) contribution to
    the predicted-class probability; sample weights decay with the number
    of dropped coordinates.
    """
    if spec.level != LEVEL_UNIT:
        raise ValidationError("the surrogate baseline scores units only")
    t0 = time.perf_counter()
    groups = _groups(seq, spec)
    dim = groups.size
    rng = np.random.default_rng(seed)
    keep_bits = rng.random((n_samples, dim)) < 0.5

    orig = predict_probs(Batch.from_sequences([seq], config), params, config)[0]
    pred = int(orig.argmax())
    drop = _drop_from_keep(seq, groups, keep_bits, spec)
    y = _predict_dropped(seq, drop, params, config)[:, pred].astype(np.float64)

    kw = kernel_width if kernel_width is not None else 0.75 * np.sqrt(dim)
    hamming = (~keep_bits).sum(axis=1).astype(np.float64)
    w = np.exp(-(hamming ** 2) / (kw ** 2))

    x = np.column_stack([keep_bits.astype(np.float64), np.ones(n_samples)])
    xtw = x.T * w
    reg = np.eye(dim + 1)
    reg[dim, dim] = 0.0  # the intercept is not penalized
    coef = np.linalg.solve(xtw @ x + reg, xtw @ y)[:dim]

    scores = np.zeros(_unit_spec_shape(seq, spec))
    scores[groups] = coef
    meta = {}
    if n_samples < dim:
        meta["warning"] = f"underdetermined fit: {n_samples} samples for {dim} coordinates"
    return AttributionScores(spec=spec, scores=scores, method="lime", ids=[seq.id],
                             seconds=time.perf_counter() - t0, meta=meta)


def shap_attrib(seq, params, config, spec, n_permutations=200, seed=0):
    """Monte-Carlo permutation estimate of Shapley values.

    Units are added in random order to a fully-dropped baseline; each
    unit's score is its average marginal change of the predicted-class
    probability.
    """
    if spec.level != LEVEL_UNIT:
        raise ValidationError("the Shapley baseline scores units only")
    t0 = time.perf_counter()
    groups = _groups(seq, spec)
    if spec.index_mode == MODE_VALUE:
        groups = np.unique(seq.units[seq.present])
    dim = groups.size
    rng = np.random.default_rng(seed)
    orig = predict_probs(Batch.from_sequences([seq], config), params, config)[0]
    pred = int(orig.argmax())

    totals = np.zeros(dim)
    for _ in range(n_permutations):
        order = rng.permutation(dim)
        keep_bits = np.zeros((dim + 1, dim), dtype=bool)
        for t, gidx in enumerate(order):
            keep_bits[t + 1] = keep_bits[t]
            keep_bits[t + 1, gidx] = True
        drop = _drop_from_keep(seq, groups, keep_bits, spec)
        p = _predict_dropped(seq, drop, params, config)[:, pred].astype(np.float64)
        totals[order] += np.diff(p)
    est = totals / n_permutations

    scores = np.zeros(_unit_spec_shape(seq, spec))
    scores[groups] = est
    return AttributionScores(spec=spec, scores=scores, method="shap", ids=[seq.id],
                             seconds=time.perf_counter() - t0,
                             meta={"n_permutations": n_permutations})
