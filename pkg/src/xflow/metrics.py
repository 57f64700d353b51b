"""Quantitative explanation quality: fidelity-style metrics, Top-K
perturbations, global-class evaluation, the byte-swap transfer experiment,
length sensitivity bins and planted-signature recovery.

"Removing" a unit substitutes the pad token (bytes) or zero (RTT) and
clears its presence flag, so removed units vanish from attention and
pooling exactly like trailing padding; positional alignment is preserved.
Interaction-level evaluation instead re-predicts with the pairwise mask
restricted to (or stripped of) the selected pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import KIND_BYTES, PAD_TOKEN, UnitSequence
from .errors import ValidationError
from .explain import (LEVEL_INTERACTION, LEVEL_UNIT, MODE_POSITIONAL,
                      MODE_VALUE, select_topk)
from .model import Batch, ForwardHooks, predict_probs

PAIR_OFF = -20.0  # additive logit that effectively disables a pair


@dataclass
class MetricResult:
    fid: float
    acc: float
    c_fid: float
    c_acc: float
    n: int
    budget_fraction: float
    method: str = ""
    level: str = LEVEL_UNIT
    index_mode: str = MODE_POSITIONAL
    meta: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {"fid": self.fid, "acc": self.acc, "c_fid": self.c_fid, "c_acc": self.c_acc,
                "n": self.n, "budget_fraction": self.budget_fraction, "method": self.method,
                "level": self.level, "index_mode": self.index_mode, "meta": self.meta}


@dataclass
class SwapResult:
    n_pairs: int
    fraction: float
    rates: list             # one transformation rate per evaluated model
    meta: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {"n_pairs": self.n_pairs, "fraction": self.fraction,
                "rates": [float(r) for r in self.rates], "meta": self.meta}


# ---------------------------------------------------------------------------
# unit-level perturbations
# ---------------------------------------------------------------------------

def _drop_positions(seq, drop):
    units = np.array(seq.units)
    present = np.array(seq.present)
    if seq.kind == KIND_BYTES:
        units[drop] = PAD_TOKEN
    else:
        units[drop] = 0.0
    present[drop] = False
    return UnitSequence(id=seq.id, kind=seq.kind, units=units, label_id=seq.label_id,
                        effective_len=int(present.sum()), present=present)


def _keep_mask(seq, topk, spec):
    """Boolean mask of positions retained by the Top-K selection."""
    if spec.level != LEVEL_UNIT:
        raise ValidationError("keep/remove substitution applies to unit-level scores; "
                              "interaction evaluation re-predicts with a restricted pair mask")
    keep = np.zeros(len(seq), dtype=bool)
    topk = np.asarray(topk)
    if spec.index_mode == MODE_POSITIONAL:
        keep[topk] = True
    else:
        keep = np.isin(seq.units, topk)
    return keep & seq.present


def perturb_keep_topk(seq, topk, spec):
    """Retain only the selected units; everything else present is removed."""
    return _drop_positions(seq, seq.present & ~_keep_mask(seq, topk, spec))


def perturb_remove_topk(seq, topk, spec):
    """Remove exactly the selected units; the complement stays."""
    return _drop_positions(seq, _keep_mask(seq, topk, spec))


# ---------------------------------------------------------------------------
# core metric computation
# ---------------------------------------------------------------------------

def _align(seqs, attribs):
    if isinstance(attribs, dict):
        table = attribs
    else:
        table = {}
        for a in attribs:
            for sid in a.ids:
                table[sid] = a
    out = []
    for s in seqs:
        if s.id not in table:
            raise ValidationError(f"no attribution for instance {s.id}")
        out.append(table[s.id])
    return out


def _interaction_bias(seq_batch, pairs_per_seq, spec, keep):
    """Additive attention-logit matrices restricting evaluation to (keep)
    or excluding (remove) the selected pairs."""
    n, L = seq_batch.present.shape
    bias = np.zeros((n, L, L), dtype=np.float32)
    for i, pairs in enumerate(pairs_per_seq):
        pairs = np.asarray(pairs)
        if spec.index_mode == MODE_POSITIONAL:
            if keep:
                bias[i].fill(PAIR_OFF)
                bias[i, pairs[:, 0], pairs[:, 1]] = 0.0
            else:
                bias[i, pairs[:, 0], pairs[:, 1]] = PAIR_OFF
        else:
            m = np.zeros((257, 257), dtype=np.float32)
            if keep:
                m.fill(PAIR_OFF)
                m[pairs[:, 0], pairs[:, 1]] = 0.0
            else:
                m[pairs[:, 0], pairs[:, 1]] = PAIR_OFF
            tok = seq_batch.tokens[i]
            bias[i] = m[tok[:, None], tok[None, :]]
    return bias


def _topk_for(seq, attrib, f):
    spec = attrib.spec
    if spec.index_mode == MODE_POSITIONAL:
        return select_topk(attrib.scores, spec, f, present=seq.present,
                           effective_len=int(seq.present.sum()))
    return select_topk(attrib.scores, spec, f)


def compute_metrics(seqs, attribs, params, config, f):
    """Four agreement fractions over an instance set.

    Fid / Acc compare the keep-only prediction against the original
    prediction / ground truth; C-Fid / C-Acc count prediction *changes*
    after removal, so all four read higher-is-better. The agreement form
    of the counterfactual pair is reported in meta for auditability.
    """
    if not seqs:
        raise ValidationError("empty instance set")
    aligned = _align(seqs, attribs)
    spec = aligned[0].spec
    batch = Batch.from_sequences(seqs, config)
    orig = predict_probs(batch, params, config).argmax(axis=1)
    truth = batch.labels

    if spec.level == LEVEL_UNIT:
        topks = [_topk_for(s, a, f) for s, a in zip(seqs, aligned)]
        keep_seqs = [perturb_keep_topk(s, t, spec) for s, t in zip(seqs, topks)]
        drop_seqs = [perturb_remove_topk(s, t, spec) for s, t in zip(seqs, topks)]
        keep_pred = predict_probs(Batch.from_sequences(keep_seqs, config), params, config).argmax(axis=1)
        drop_pred = predict_probs(Batch.from_sequences(drop_seqs, config), params, config).argmax(axis=1)
    else:
        pairs = [_topk_for(s, a, f) for s, a in zip(seqs, aligned)]
        keep_bias = _interaction_bias(batch, pairs, spec, keep=True)
        drop_bias = _interaction_bias(batch, pairs, spec, keep=False)
        keep_pred = predict_probs(batch, params, config,
                                  hooks=ForwardHooks(attn_bias=keep_bias)).argmax(axis=1)
        drop_pred = predict_probs(batch, params, config,
                                  hooks=ForwardHooks(attn_bias=drop_bias)).argmax(axis=1)

    method = getattr(aligned[0], "method", "")
    return MetricResult(
        fid=float((keep_pred == orig).mean()),
        acc=float((keep_pred == truth).mean()),
        c_fid=float((drop_pred != orig).mean()),
        c_acc=float((drop_pred != truth).mean()),
        n=len(seqs), budget_fraction=f, method=method,
        level=spec.level, index_mode=spec.index_mode,
        meta={"agreement_form": {"c_fid": float((drop_pred == orig).mean()),
                                 "c_acc": float((drop_pred == truth).mean())}})


def evaluate_global(seqs, class_id, shared, params, config, f):
    """Metrics over the instances predicted as ``class_id`` using one
    shared Top-K selection from a class-level mask."""
    batch = Batch.from_sequences(seqs, config)
    pred = predict_probs(batch, params, config).argmax(axis=1)
    chosen = [s for s, p in zip(seqs, pred) if p == class_id]
    if not chosen:
        raise ValidationError(f"no instances predicted as class {class_id}")
    spec = shared.spec
    topk = select_topk(shared.scores, spec, f)
    if spec.level == LEVEL_UNIT:
        keep_seqs = [perturb_keep_topk(s, topk, spec) for s in chosen]
        drop_seqs = [perturb_remove_topk(s, topk, spec) for s in chosen]
        sub = Batch.from_sequences(chosen, config)
        orig = predict_probs(sub, params, config).argmax(axis=1)
        truth = sub.labels
        keep_pred = predict_probs(Batch.from_sequences(keep_seqs, config), params, config).argmax(axis=1)
        drop_pred = predict_probs(Batch.from_sequences(drop_seqs, config), params, config).argmax(axis=1)
    else:
        sub = Batch.from_sequences(chosen, config)
        orig = predict_probs(sub, params, config).argmax(axis=1)
        truth = sub.labels
        pairs = [topk] * len(chosen)
        keep_pred = predict_probs(sub, params, config, hooks=ForwardHooks(
            attn_bias=_interaction_bias(sub, pairs, spec, keep=True))).argmax(axis=1)
        drop_pred = predict_probs(sub, params, config, hooks=ForwardHooks(
            attn_bias=_interaction_bias(sub, pairs, spec, keep=False))).argmax(axis=1)
    return MetricResult(
        fid=float((keep_pred == orig).mean()),
        acc=float((keep_pred == truth).mean()),
        c_fid=float((drop_pred != orig).mean()),
        c_acc=float((drop_pred != truth).mean()),
        n=len(chosen), budget_fraction=f, method=getattr(shared, "method", ""),
        level=spec.level, index_mode=spec.index_mode,
        meta={"class_id": class_id,
              "agreement_form": {"c_fid": float((drop_pred == orig).mean()),
                                 "c_acc": float((drop_pred == truth).mean())}})


# ---------------------------------------------------------------------------
# byte-swap transfer experiment
# ---------------------------------------------------------------------------

def byte_swap_experiment(seqs, attribs, models, f=0.10, seed=0, n_pairs=200):
    """Exchange the most important byte positions between instances of
    different classes and count how often each model follows the donor.

    For a sampled pair (recipient a of class c1, donor b of class c2) the
    recipient takes the donor's byte values at the union of both instances'
    Top-f positions; a transformation is counted when a model predicts the
    modified recipient as c2. Accepting several models measures whether the
    explanation transfers beyond the model that produced it.
    """
    if not 0.0 < f <= 1.0:
        raise ValidationError("swap fraction must lie in (0, 1]")
    if any(s.kind != KIND_BYTES for s in seqs):
        raise ValidationError("the swap experiment needs byte sequences")
    labels = np.array([s.label_id for s in seqs])
    if len(set(labels.tolist())) < 2:
        raise ValidationError("the swap experiment needs at least two classes")
    aligned = _align(seqs, attribs)
    topks = [_topk_for(s, a, f) for s, a in zip(seqs, aligned)]

    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n_pairs:
        i, j = rng.integers(0, len(seqs), 2)
        if labels[i] != labels[j]:
            pairs.append((int(i), int(j)))

    modified = []
    donor_class = []
    for i, j in pairs:
        a, b = seqs[i], seqs[j]
        pos = np.union1d(np.asarray(topks[i]), np.asarray(topks[j]))
        pos = pos[a.present[pos] & b.present[pos]]
        units = np.array(a.units)
        units[pos] = b.units[pos]
        modified.append(UnitSequence(id=f"{a.id}<~{b.id}", kind=a.kind, units=units,
                                     label_id=a.label_id, effective_len=a.effective_len,
                                     present=np.array(a.present)))
        donor_class.append(b.label_id)
    donor_class = np.array(donor_class)

    rates = []
    for m_params, m_config in models:
        pred = predict_probs(Batch.from_sequences(modified, m_config),
                             m_params, m_config).argmax(axis=1)
        rates.append(float((pred == donor_class).mean()))
    return SwapResult(n_pairs=len(pairs), fraction=f, rates=rates,
                      meta={"seed": seed})


# ---------------------------------------------------------------------------
# length sensitivity / oracle recovery
# ---------------------------------------------------------------------------

def length_sensitivity(seqs, attribs, params, config, f, bin_edges):
    """Metrics per effective-length bin [lo, hi); empty bins are omitted."""
    edges = list(bin_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])) or len(edges) < 2:
        raise ValidationError("bin edges must be strictly increasing")
    out = []
    for lo, hi in zip(edges, edges[1:]):
        sub = [s for s in seqs if lo <= s.effective_len < hi]
        if not sub:
            continue
        out.append({"lo": lo, "hi": hi,
                    "result": compute_metrics(sub, attribs, params, config, f)})
    return out


def signature_recovery(reports, truth):
    """Macro-averaged precision/recall of unit-level Top-K selections
    against known important positions (or values), keyed by instance id."""
    if not reports:
        raise ValidationError("no reports to score")
    precisions, recalls = [], []
    for rep in reports:
        topk = np.asarray(rep.topk)
        if topk.ndim != 1:
            raise ValidationError("recovery is defined for unit-level selections")
        sid = rep.ids[0]
        if sid not in truth:
            raise ValidationError(f"no ground truth for instance {sid}")
        want = {int(x) for x in truth[sid]}
        got = {int(x) for x in topk}
        hit = len(want & got)
        precisions.append(hit / max(1, len(got)))
        recalls.append(hit / max(1, len(want)))
    return float(np.mean(precisions)), float(np.mean(recalls))
