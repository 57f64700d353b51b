"""Dataset types, JSONL/traceroute ingestion, padding and synthetic oracles.

A traffic instance is a sequence of units: byte tokens in [0, 255] with 256
reserved for trailing padding, or per-hop latencies in milliseconds. Every
sequence carries an explicit presence mask so that downstream attention,
pooling and masking can exclude padded (or perturbed-away) positions
exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

PAD_TOKEN = 256
VOCAB_SIZE = 257

KIND_BYTES = "bytes"
KIND_RTT = "rtt"

# per-hop latency growth of the synthetic base profile, in ms
RTT_INCREMENT_RANGE = (0.5, 3.0)


@dataclass(frozen=True)
class Vocabulary:
    size: int = VOCAB_SIZE
    pad_token: int = PAD_TOKEN


@dataclass(frozen=True, eq=False)
class UnitSequence:
    """One traffic instance: unit values, class label and presence mask."""

    id: str
    kind: str
    units: np.ndarray
    label_id: int
    effective_len: int
    present: np.ndarray

    def __post_init__(self):
        if self.kind not in (KIND_BYTES, KIND_RTT):
            raise ValidationError(f"unknown sequence kind {self.kind!r}")
        units = np.asarray(self.units)
        present = np.asarray(self.present, dtype=bool)
        if self.kind == KIND_BYTES:
            units = units.astype(np.int64)
            if units.size and (units.min() < 0 or units.max() > PAD_TOKEN):
                raise ValidationError(f"sequence {self.id}: byte token out of [0, {PAD_TOKEN}]")
            if np.any((units == PAD_TOKEN) & present):
                raise ValidationError(f"sequence {self.id}: pad token at a present position")
        else:
            units = units.astype(np.float64)
            if units.size and (not np.all(np.isfinite(units)) or units.min() < 0):
                raise ValidationError(f"sequence {self.id}: RTT values must be finite and >= 0")
        if present.shape != units.shape:
            raise ValidationError(f"sequence {self.id}: presence mask shape mismatch")
        if self.effective_len != int(present.sum()):
            raise ValidationError(f"sequence {self.id}: effective_len does not match presence mask")
        units.setflags(write=False)
        present.setflags(write=False)
        object.__setattr__(self, "units", units)
        object.__setattr__(self, "present", present)

    def __len__(self):
        return len(self.units)

    def __eq__(self, other):
        return (isinstance(other, UnitSequence)
                and self.id == other.id and self.kind == other.kind
                and self.label_id == other.label_id
                and self.effective_len == other.effective_len
                and np.array_equal(self.units, other.units)
                and np.array_equal(self.present, other.present))


def make_sequence(seq_id, kind, units, label_id):
    """Build a fully-present sequence (no padding yet)."""
    units = np.asarray(units)
    return UnitSequence(id=seq_id, kind=kind, units=units, label_id=label_id,
                        effective_len=len(units), present=np.ones(len(units), dtype=bool))


@dataclass
class LabeledDataset:
    sequences: list
    labels: list
    splits: dict = field(default_factory=lambda: {"train": [], "val": [], "test": []})
    metadata: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.labels)

    def __len__(self):
        return len(self.sequences)

    def split(self, name):
        return [self.sequences[i] for i in self.splits[name]]

    def by_id(self, seq_id):
        for s in self.sequences:
            if s.id == seq_id:
                return s
        raise KeyError(seq_id)


@dataclass(frozen=True)
class TracerouteRecord:
    src: str
    dst: str
    hops: tuple          # ordered (hop_number, rtt_ms or None)
    label: str = None


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-signature generator configuration.

    ``signature`` maps a class index to its plantings: (position, byte value)
    pairs for byte data, (spike hop, spike magnitude in ms) for RTT data.
    The per-class positions are globally disjoint so the ground-truth
    important units are unambiguous.
    """

    kind: str
    num_classes: int
    seq_len: int
    signature: dict
    instances_per_class: int
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (KIND_BYTES, KIND_RTT):
            raise ValidationError(f"unknown kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if set(self.signature) != set(range(self.num_classes)):
            raise ValidationError("signature must cover exactly classes 0..C-1")
        seen = {}
        for c, plants in self.signature.items():
            if not plants:
                raise ValidationError(f"class {c}: empty signature")
            for pos, val in plants:
                if not 0 <= pos < self.seq_len:
                    raise ValidationError(f"class {c}: signature position {pos} out of range")
                if pos in seen:
                    raise ValidationError(
                        f"signature position {pos} shared by classes {seen[pos]} and {c}")
                seen[pos] = c
                if self.kind == KIND_BYTES and not 0 <= int(val) <= 255:
                    raise ValidationError(f"class {c}: byte value {val} out of [0, 255]")


# ---------------------------------------------------------------------------
# JSONL ingestion / serialization
# ---------------------------------------------------------------------------

_JSONL_FIELDS = {"id", "kind", "units", "label"}


def load_labels(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    labels = doc.get("labels") if isinstance(doc, dict) else None
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise ValidationError(f"{path}: labels file must be {{\"labels\": [str, ...]}}")
    if len(set(labels)) != len(labels):
        raise ValidationError(f"{path}: duplicate label names")
    return labels


def load_jsonl(path, labels_path):
    """Read one-object-per-line sequences; label strings are mapped to
    indices by the labels-file order. The pad token is internal-only and is
    rejected in inputs."""
    labels = load_labels(labels_path)
    index = {name: i for i, name in enumerate(labels)}
    sequences = []
    kind_seen = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            if not isinstance(obj, dict) or set(obj) != _JSONL_FIELDS:
                raise ParseError(f"expected exactly fields {sorted(_JSONL_FIELDS)}", line=lineno)
            kind = obj["kind"]
            if kind not in (KIND_BYTES, KIND_RTT):
                raise ParseError(f"unknown kind {kind!r}", line=lineno)
            if kind_seen is None:
                kind_seen = kind
            elif kind != kind_seen:
                raise ParseError("mixed sequence kinds in one dataset", line=lineno)
            units = obj["units"]
            if not isinstance(units, list) or not units:
                raise ParseError("units must be a non-empty array", line=lineno)
            if kind == KIND_BYTES:
                if any((not isinstance(u, int)) or isinstance(u, bool) for u in units):
                    raise ParseError("byte units must be integers", line=lineno)
                if any(u < 0 or u > 255 for u in units):
                    raise ParseError("byte token out of [0, 255] (pad 256 is internal-only)",
                                     line=lineno)
            else:
                if any(isinstance(u, bool) or not isinstance(u, (int, float)) for u in units):
                    raise ParseError("rtt units must be numbers", line=lineno)
                if any(not math.isfinite(u) or u < 0 for u in units):
                    raise ParseError("rtt units must be finite and >= 0", line=lineno)
            if obj["label"] not in index:
                raise ParseError(f"unknown label {obj['label']!r}", line=lineno)
            sequences.append(make_sequence(str(obj["id"]), kind, units, index[obj["label"]]))
    return LabeledDataset(sequences=sequences, labels=labels)


def save_jsonl(ds, path):
    """Write the present (non-padding) units of every sequence; inverse of
    load_jsonl for unpadded data."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in ds.sequences:
            units = s.units[s.present]
            payload = [int(u) for u in units] if s.kind == KIND_BYTES else [float(u) for u in units]
            fh.write(json.dumps({"id": s.id, "kind": s.kind, "units": payload,
                                 "label": ds.labels[s.label_id]}) + "\n")


def save_labels(labels, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"labels": list(labels)}) + "\n")


# ---------------------------------------------------------------------------
# splitting / padding
# ---------------------------------------------------------------------------

def split_dataset(ds, ratios=(0.8, 0.1, 0.1), seed=0):
    """Stratified shuffle into train/val/test; deterministic for a fixed
    (dataset, ratios, seed). Per-class counts use largest-remainder
    rounding so class frequencies stay within one instance per split."""
    if len(ds) == 0:
        raise ValidationError("cannot split an empty dataset")
    if len(ds) < 3:
        raise ValidationError("need at least 3 sequences to split")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    out = {"train": [], "val": [], "test": []}
    names = ("train", "val", "test")
    for c in range(ds.num_classes):
        idx = np.array([i for i, s in enumerate(ds.sequences) if s.label_id == c], dtype=np.int64)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        n = idx.size
        exact = [r * n for r in ratios]
        counts = [int(math.floor(e)) for e in exact]
        rem = n - sum(counts)
        order = sorted(range(3), key=lambda k: (-(exact[k] - counts[k]), k))
        for k in order[:rem]:
            counts[k] += 1
        if counts[0] == 0 and n >= 3 and ratios[0] > 0:
            donor = max(range(1, 3), key=lambda k: counts[k])
            counts[donor] -= 1
            counts[0] += 1
        start = 0
        for name, cnt in zip(names, counts):
            out[name].extend(int(i) for i in idx[start:start + cnt])
            start += cnt
    return LabeledDataset(sequences=ds.sequences, labels=ds.labels,
                          splits={k: sorted(v) for k, v in out.items()},
                          metadata=dict(ds.metadata))


def pad_truncate(seq, max_len):
    """Standardize a sequence to exactly ``max_len`` units. Bytes pad with
    the pad token; RTT pads with 0.0. Padded positions are marked absent."""
    if max_len < 1:
        raise ValidationError("max_len must be >= 1")
    n = len(seq.units)
    if n >= max_len:
        units = seq.units[:max_len]
        present = seq.present[:max_len]
    else:
        fill = PAD_TOKEN if seq.kind == KIND_BYTES else 0.0
        units = np.concatenate([seq.units, np.full(max_len - n, fill, dtype=seq.units.dtype)])
        present = np.concatenate([seq.present, np.zeros(max_len - n, dtype=bool)])
    return UnitSequence(id=seq.id, kind=seq.kind, units=units, label_id=seq.label_id,
                        effective_len=int(present.sum()), present=present)


# ---------------------------------------------------------------------------
# traceroute ingestion
# ---------------------------------------------------------------------------

def ingest_traceroute(path, max_hops):
    """Convert traceroute records to RTT sequences of length ``max_hops``.

    Missing per-hop RTTs are carried forward from the previous present hop
    (leading gaps become 0.0); negative or non-finite measurements are
    treated as missing. Records with no usable RTT at all are skipped and
    counted in the dataset metadata.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, list):
        raise ParseError(f"{path}: expected a JSON array of traceroute records")
    skipped = 0
    rows = []
    label_names = set()
    for i, rec in enumerate(doc):
        for key in ("src", "dst", "hops"):
            if key not in rec:
                raise ValidationError(f"record {i}: missing field {key!r}")
        label = rec.get("label")
        if not label:
            raise ValidationError(f"record {i}: missing label")
        hops = rec["hops"]
        last_num = 0
        values = []
        carried = None
        n_present = 0
        for h in hops:
            num = h["hop"]
            if num <= last_num:
                raise ValidationError(f"record {i}: hop numbers must be strictly increasing")
            last_num = num
            rtt = h.get("rtt_ms")
            if rtt is not None and (isinstance(rtt, bool) or not math.isfinite(rtt) or rtt < 0):
                rtt = None
            if rtt is not None:
                carried = float(rtt)
                n_present += 1
            values.append(carried if carried is not None else 0.0)
        if n_present == 0:
            skipped += 1
            continue
        rows.append((f"{i}:{rec['src']}->{rec['dst']}", values, label))
        label_names.add(label)
    if not rows:
        raise ValidationError(f"{path}: no usable labeled traceroute records")
    labels = sorted(label_names)
    index = {name: k for k, name in enumerate(labels)}
    sequences = [pad_truncate(make_sequence(sid, KIND_RTT, vals, index[lab]), max_hops)
                 for sid, vals, lab in rows]
    return LabeledDataset(sequences=sequences, labels=labels, metadata={"skipped": skipped})


# ---------------------------------------------------------------------------
# synthetic oracle generators
# ---------------------------------------------------------------------------

def generate_synthetic(spec):
    """Generate a dataset with planted, disjoint class signatures and attach
    the ground-truth important positions/values as metadata."""
    rng = np.random.default_rng(spec.seed)
    sequences = []
    truth_positions = {}
    labels = [f"c{c}" for c in range(spec.num_classes)]
    for c in range(spec.num_classes):
        plants = [(int(p), v) for p, v in spec.signature[c]]
        sig_mask = np.zeros(spec.seq_len, dtype=bool)
        for pos, _ in plants:
            sig_mask[pos] = True
        for i in range(spec.instances_per_class):
            if spec.kind == KIND_BYTES:
                units = rng.integers(0, 256, spec.seq_len, dtype=np.int64)
                for pos, val in plants:
                    units[pos] = int(val)
                flips = rng.random(spec.seq_len) < spec.noise
                redraw = rng.integers(0, 256, spec.seq_len, dtype=np.int64)
                units = np.where(flips & ~sig_mask, redraw, units)
            else:
                lo, hi = RTT_INCREMENT_RANGE
                units = np.cumsum(rng.uniform(lo, hi, spec.seq_len))
                for pos, mag in plants:
                    units[pos] += float(mag)
                units = np.maximum(units + rng.normal(0.0, spec.noise, spec.seq_len), 0.0)
            sid = f"c{c}-{i}"
            sequences.append(make_sequence(sid, spec.kind, units, c))
            truth_positions[sid] = sorted(pos for pos, _ in plants)
    truth_values = {labels[c]: sorted(int(v) for _, v in spec.signature[c])
                    for c in range(spec.num_classes)} if spec.kind == KIND_BYTES else {}
    metadata = {
        "truth_positions": truth_positions,
        "class_positions": {labels[c]: sorted(p for p, _ in spec.signature[c])
                            for c in range(spec.num_classes)},
        "class_values": truth_values,
    }
    return LabeledDataset(sequences=sequences, labels=labels, metadata=metadata)
