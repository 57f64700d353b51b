"""Operator-facing command line: synth, ingest, train, explain, eval, swap.

One JSON config document (sections: data / model / explainer / eval) plus
flag overrides; flags win. Every command is deterministic for a fixed
(config, inputs, seed): wall-clock timings never enter output files, only
stdout/stderr. Exit codes: 0 success, 2 usage or validation problem,
3 unexpected runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data as dm
from .baselines import (attention_attrib, lime_attrib, random_attrib,
                        saliency_attrib, shap_attrib)
from .errors import XflowError
from .explain import (LEVEL_INTERACTION, LEVEL_UNIT, MODE_POSITIONAL,
                      MODE_VALUE, TARGET_GLOBAL, TARGET_LOCAL, ExplainerConfig,
                      MaskSpec, derive_seed, instances_predicted_as,
                      optimize_mask, report_from_json_dict)
from .metrics import byte_swap_experiment, compute_metrics
from .model import (Batch, ClassifierConfig, ModelParams, TrainConfig,
                    load_checkpoint, predict_probs, save_checkpoint, train)
from .svgmap import render_interaction_heatmap, render_unit_heatmap

log = logging.getLogger("xflow")

_SECTION_KEYS = {
    "data": {"kind", "num_classes", "seq_len", "signature", "instances_per_class",
             "noise", "max_hops", "ratios"},
    "model": {"arch", "kind", "max_len", "d_model", "n_layers", "n_heads", "ff_hidden",
              "dropout", "epochs", "batch_size", "learning_rate", "patience"},
    "explainer": {"objective", "alpha1", "alpha2", "budget", "steps", "learning_rate",
                  "topk_fraction", "init", "level", "index_mode"},
    "eval": {"budgets", "fraction", "n_pairs", "lime_samples", "shap_permutations"},
}


class UsageError(XflowError):
    pass


def load_run_config(path, seed_flag=None):
    """Validate the config document up front: unknown keys are rejected and
    the seed is mandatory (file or flag)."""
    doc = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
    unknown = set(doc) - set(_SECTION_KEYS) - {"seed"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for section, known in _SECTION_KEYS.items():
        sub = doc.get(section, {})
        if not isinstance(sub, dict):
            raise UsageError(f"config section {section!r} must be an object")
        bad = set(sub) - known
        if bad:
            raise UsageError(f"unknown keys in config section {section!r}: {sorted(bad)}")
    seed = seed_flag if seed_flag is not None else doc.get("seed")
    if seed is None:
        raise UsageError("a seed is mandatory: set \"seed\" in the config or pass --seed")
    return doc, int(seed)


def _section(doc, name):
    return dict(doc.get(name, {}))


# ---------------------------------------------------------------------------
# synth / ingest
# ---------------------------------------------------------------------------

def cmd_synth(args):
    doc, seed = load_run_config(args.config, args.seed)
    sec = _section(doc, "data")
    if "signature" not in sec:
        raise UsageError("synth needs data.signature in the config")
    signature = {int(k): [(int(p), v) for p, v in pairs]
                 for k, pairs in sec["signature"].items()}
    spec = dm.SyntheticSpec(
        kind=sec.get("kind", dm.KIND_BYTES),
        num_classes=int(sec.get("num_classes", len(signature))),
        seq_len=int(sec["seq_len"]),
        signature=signature,
        instances_per_class=int(sec.get("instances_per_class", 100)),
        noise=float(sec.get("noise", 0.0)),
        seed=seed,
    )
    ds = dm.generate_synthetic(spec)
    os.makedirs(args.out, exist_ok=True)
    dm.save_jsonl(ds, os.path.join(args.out, "dataset.jsonl"))
    dm.save_labels(ds.labels, os.path.join(args.out, "labels.json"))
    with open(os.path.join(args.out, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(ds.metadata, fh, sort_keys=True)
        fh.write("\n")
    print(f"N={len(ds)} C={ds.num_classes}")
    return 0


def cmd_ingest(args):
    ds = dm.ingest_traceroute(args.traceroute, args.max_hops)
    os.makedirs(args.out, exist_ok=True)
    dm.save_jsonl(ds, os.path.join(args.out, "dataset.jsonl"))
    dm.save_labels(ds.labels, os.path.join(args.out, "labels.json"))
    print(f"N={len(ds)} C={ds.num_classes} skipped={ds.metadata.get('skipped', 0)}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_split_dataset(args, doc, seed):
    ds = dm.load_jsonl(args.data, args.labels)
    ratios = tuple(_section(doc, "data").get("ratios", (0.8, 0.1, 0.1)))
    return dm.split_dataset(ds, ratios, seed)


def _classifier_config(doc, ds, seed):
    sec = _section(doc, "model")
    data_kind = ds.sequences[0].kind if ds.sequences else dm.KIND_BYTES
    kind = sec.get("kind", data_kind)
    if kind != data_kind:
        raise UsageError(f"model kind {kind!r} does not match dataset kind {data_kind!r}")
    return ClassifierConfig(
        num_classes=ds.num_classes,
        kind=kind,
        arch=sec.get("arch", "transformer"),
        max_len=int(sec.get("max_len", 256)),
        d_model=int(sec.get("d_model", 64)),
        n_layers=int(sec.get("n_layers", 2)),
        n_heads=int(sec.get("n_heads", 4)),
        ff_hidden=int(sec.get("ff_hidden", 128)),
        dropout=float(sec.get("dropout", 0.2)),
        seed=seed,
    )


def cmd_train(args):
    doc, seed = load_run_config(args.config, args.seed)
    ds = _load_split_dataset(args, doc, seed)
    config = _classifier_config(doc, ds, seed)
    sec = _section(doc, "model")
    hyper = TrainConfig(
        epochs=int(sec.get("epochs", 100)),
        batch_size=int(sec.get("batch_size", 64)),
        learning_rate=float(sec.get("learning_rate", 1e-3)),
        patience=int(sec.get("patience", 10)),
        seed=seed,
    )
    t0 = time.perf_counter()
    params, train_log = train(ds, config, hyper)
    log.info("training finished in %.1fs", time.perf_counter() - t0)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(params, config, os.path.join(args.out, "checkpoint"))
    with open(os.path.join(args.out, "train_log.json"), "w", encoding="utf-8") as fh:
        json.dump(train_log, fh, sort_keys=True)
        fh.write("\n")
    best = train_log["best_epoch"]
    accs = {e["epoch"]: e["val_acc"] for e in train_log["epochs"]}
    print(f"best_epoch={best} val_acc={accs.get(best, float('nan')):.4f}")
    return 0


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

def _select_instances(ds, split):
    if split == "all" or not ds.splits.get(split):
        return ds.sequences
    return ds.split(split)


def _explainer_config(doc, args, seed, objective):
    sec = _section(doc, "explainer")
    frac = args.fraction if args.fraction is not None else float(sec.get("topk_fraction", 0.05))
    return ExplainerConfig(
        objective=objective,
        alpha1=float(sec.get("alpha1", 0.1)),
        alpha2=float(sec.get("alpha2", 1.0)),
        budget=sec.get("budget"),
        steps=int(sec.get("steps", 300)),
        learning_rate=float(sec.get("learning_rate", 0.1)),
        topk_fraction=frac,
        init=sec.get("init", "zeros"),
        seed=seed,
    )


def _safe_name(sid):
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(sid))


_WORKER = {}


def _init_worker(tensors, config_doc, spec_doc, xcfg_kwargs):
    _WORKER["params"] = ModelParams(tensors)
    _WORKER["config"] = ClassifierConfig.from_dict(config_doc)
    _WORKER["spec"] = MaskSpec.from_dict(spec_doc)
    _WORKER["xcfg_kwargs"] = xcfg_kwargs


def _explain_one(payload):
    idx, seq, seed = payload
    xcfg = ExplainerConfig(**{**_WORKER["xcfg_kwargs"], "seed": seed})
    rep = optimize_mask(seq, _WORKER["params"], _WORKER["config"], _WORKER["spec"], xcfg)
    return idx, rep


def cmd_explain(args):
    doc, seed = load_run_config(args.config, args.seed)
    params, config = load_checkpoint(args.checkpoint)
    ds = dm.load_jsonl(args.data, args.labels)
    if any(s.kind != config.kind for s in ds.sequences):
        raise UsageError("dataset kind does not match the checkpoint")
    ratios = tuple(_section(doc, "data").get("ratios", (0.8, 0.1, 0.1)))
    if args.split != "all":
        ds = dm.split_dataset(ds, ratios, seed)
    seqs = [dm.pad_truncate(s, config.max_len) for s in _select_instances(ds, args.split)]

    sec = _section(doc, "explainer")
    objective = args.objective or sec.get("objective", "label")
    level = args.level or sec.get("level", LEVEL_UNIT)
    if args.index_mode:
        index_mode = args.index_mode
    elif "index_mode" in sec:
        index_mode = sec["index_mode"]
    else:
        index_mode = MODE_VALUE if objective == "global" else MODE_POSITIONAL
    xcfg = _explainer_config(doc, args, seed, objective)

    os.makedirs(args.out, exist_ok=True)
    reports = []
    t0 = time.perf_counter()
    if objective == "global":
        batch = Batch.from_sequences(seqs, config)
        pred = predict_probs(batch, params, config).argmax(axis=1)
        for c in range(config.num_classes):
            chosen = [s for s, p in zip(seqs, pred) if p == c]
            if not chosen:
                log.info("class %d: no instances predicted, skipped", c)
                continue
            spec = MaskSpec(level=level, index_mode=index_mode, target=TARGET_GLOBAL, class_id=c)
            reports.append(optimize_mask(chosen, params, config, spec, xcfg))
    else:
        spec = MaskSpec(level=level, index_mode=index_mode, target=TARGET_LOCAL)
        jobs = [(i, s, derive_seed(seed, s.id)) for i, s in enumerate(seqs)]
        if args.jobs > 1:
            with ProcessPoolExecutor(
                    max_workers=args.jobs, initializer=_init_worker,
                    initargs=(params.tensors, config.to_dict(), spec.to_dict(),
                              {k: v for k, v in xcfg.__dict__.items() if k != "seed"})) as pool:
                done = sorted(pool.map(_explain_one, jobs), key=lambda r: r[0])
                reports = [rep for _, rep in done]
        else:
            for i, seq, jseed in jobs:
                xc = ExplainerConfig(**{**{k: v for k, v in xcfg.__dict__.items() if k != "seed"},
                                        "seed": jseed})
                reports.append(optimize_mask(seq, params, config, spec, xc))
    wall = time.perf_counter() - t0
    if reports:
        log.info("explained %d targets in %.1fs (%.2fs each)", len(reports), wall,
                 wall / len(reports))

    dense = args.dense or level == LEVEL_UNIT
    with open(os.path.join(args.out, "reports.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for rep in reports:
            rep.meta["topk_fraction"] = xcfg.topk_fraction
            fh.write(json.dumps(rep.to_json_dict(include_timing=False, dense=dense),
                                sort_keys=True) + "\n")

    if args.svg:
        by_id = {s.id: s for s in seqs}
        for rep in reports:
            name = f"heatmap_class{rep.spec.class_id}.svg" if rep.spec.target == TARGET_GLOBAL \
                else f"heatmap_{_safe_name(rep.ids[0])}.svg"
            if rep.spec.level == LEVEL_UNIT:
                present = None
                if rep.spec.index_mode == MODE_POSITIONAL and rep.spec.target == TARGET_LOCAL:
                    present = by_id[rep.ids[0]].present
                svg = render_unit_heatmap(rep.scores, rep.topk, present=present)
            else:
                svg = render_interaction_heatmap(rep.scores, rep.topk)
            with open(os.path.join(args.out, name), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(svg)
    print(f"reports={len(reports)}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_reports(path):
    reports = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                reports.append(report_from_json_dict(json.loads(line)))
    if not reports:
        raise UsageError(f"{path}: no reports")
    return reports


def _baseline_spec(method, args):
    level = args.level or (LEVEL_INTERACTION if method == "self_attention" else LEVEL_UNIT)
    index_mode = args.index_mode or MODE_POSITIONAL
    return MaskSpec(level=level, index_mode=index_mode, target=TARGET_LOCAL)


def _compute_baseline(method, seqs, params, config, args, doc, seed):
    sec = _section(doc, "eval")
    spec = _baseline_spec(method, args)
    out = []
    for seq in seqs:
        jseed = derive_seed(seed, seq.id)
        if method == "random":
            out.append(random_attrib(seq, spec, seed=jseed))
        elif method == "saliency":
            out.append(saliency_attrib(seq, params, config, spec))
        elif method == "self_attention":
            out.append(attention_attrib(seq, params, config))
        elif method == "lime":
            out.append(lime_attrib(seq, params, config, spec,
                                   n_samples=int(sec.get("lime_samples", 1000)), seed=jseed))
        elif method == "shap":
            out.append(shap_attrib(seq, params, config, spec,
                                   n_permutations=int(sec.get("shap_permutations", 200)),
                                   seed=jseed))
        else:
            raise UsageError(f"unknown baseline method {method!r}")
    return out


def _format_table(rows):
    header = ("method", "budget", "Fid", "Acc", "C-Fid", "C-Acc", "n")
    lines = [f"{header[0]:<16}{header[1]:>8}{header[2]:>9}{header[3]:>9}"
             f"{header[4]:>9}{header[5]:>9}{header[6]:>7}"]
    for r in rows:
        lines.append(f"{r.method:<16}{r.budget_fraction:>8.2%}{r.fid:>9.3f}{r.acc:>9.3f}"
                     f"{r.c_fid:>9.3f}{r.c_acc:>9.3f}{r.n:>7d}")
    return "\n".join(lines)


def cmd_eval(args):
    doc, seed = load_run_config(args.config, args.seed)
    params, config = load_checkpoint(args.checkpoint)
    ds = dm.load_jsonl(args.data, args.labels)
    ratios = tuple(_section(doc, "data").get("ratios", (0.8, 0.1, 0.1)))
    if args.split != "all":
        ds = dm.split_dataset(ds, ratios, seed)
    seqs = [dm.pad_truncate(s, config.max_len) for s in _select_instances(ds, args.split)]

    sec = _section(doc, "eval")
    if args.budgets:
        budgets = [float(b) for b in args.budgets.split(",")]
    else:
        budgets = [float(b) for b in sec.get("budgets", (0.01, 0.05, 0.10))]

    if args.reports:
        attribs = _load_reports(args.reports)
        covered = {sid for a in attribs for sid in a.ids}
        seqs = [s for s in seqs if s.id in covered]
        if not seqs:
            raise UsageError("the report file covers none of the selected instances")
        seconds = [a.seconds for a in attribs if a.seconds]
        if any(a.meta.get("sparse") for a in attribs):
            stored = {a.meta.get("topk_fraction") for a in attribs}
            if any(abs(b - s) > 1e-12 for b in budgets for s in stored if s is not None):
                raise UsageError("sparse interaction reports only support their stored "
                                 "budget; re-run explain with --dense")
    elif args.method:
        t0 = time.perf_counter()
        attribs = _compute_baseline(args.method, seqs, params, config, args, doc, seed)
        seconds = [time.perf_counter() - t0]
    else:
        raise UsageError("eval needs --reports or --method")

    rows = [compute_metrics(seqs, attribs, params, config, f) for f in budgets]
    print(_format_table(rows))
    if seconds:
        print(f"runtime: {float(np.sum(seconds)) / len(seqs):.2f}s per instance")
    else:
        print("runtime: n/a (reports carry no timing)")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"rows": [r.to_json_dict() for r in rows]}, fh, sort_keys=True)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# swap
# ---------------------------------------------------------------------------

def cmd_swap(args):
    doc, seed = load_run_config(args.config, args.seed)
    if args.fraction is not None and not 0.0 < args.fraction <= 1.0:
        raise UsageError("--fraction must lie in (0, 1]")
    models = [load_checkpoint(c) for c in args.checkpoint]
    config = models[0][1]
    ds = dm.load_jsonl(args.data, args.labels)
    if config.kind != dm.KIND_BYTES or any(s.kind != dm.KIND_BYTES for s in ds.sequences):
        raise UsageError("the swap experiment needs byte data")
    ratios = tuple(_section(doc, "data").get("ratios", (0.8, 0.1, 0.1)))
    if args.split != "all":
        ds = dm.split_dataset(ds, ratios, seed)
    seqs = [dm.pad_truncate(s, config.max_len) for s in _select_instances(ds, args.split)]
    attribs = _load_reports(args.reports)
    covered = {sid for a in attribs for sid in a.ids}
    seqs = [s for s in seqs if s.id in covered]
    sec = _section(doc, "eval")
    f = args.fraction if args.fraction is not None else float(sec.get("fraction", 0.10))
    result = byte_swap_experiment(seqs, attribs, [(p, c) for p, c in models], f=f, seed=seed,
                                  n_pairs=int(sec.get("n_pairs", 200)))
    for path, rate in zip(args.checkpoint, result.rates):
        print(f"{path}: transformation_rate={rate:.3f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(result.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="xflow",
                                     description="train and explain traffic-sequence classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if checkpoint:
            p.add_argument("--data", required=True, help="dataset JSONL")
            p.add_argument("--labels", required=True, help="labels JSON")
            p.add_argument("--split", default="all", choices=("all", "train", "val", "test"),
                           help="restrict to one split (re-derived from config ratios+seed)")

    p = sub.add_parser("synth", help="generate a planted-signature dataset")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="convert traceroute JSON to an RTT dataset")
    p.add_argument("--traceroute", required=True)
    p.add_argument("--max-hops", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a classifier")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("explain", help="optimize importance masks")
    common(p, checkpoint=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", choices=(LEVEL_UNIT, LEVEL_INTERACTION))
    p.add_argument("--index-mode", choices=(MODE_POSITIONAL, MODE_VALUE))
    p.add_argument("--objective", choices=("confidence", "label", "global"))
    p.add_argument("--fraction", type=float, help="Top-K fraction")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--svg", action="store_true", help="emit heatmap SVGs")
    p.add_argument("--dense", action="store_true",
                   help="store full interaction score matrices in the reports")

    p = sub.add_parser("eval", help="explanation quality metrics")
    common(p, checkpoint=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reports", help="reports JSONL from explain")
    p.add_argument("--method", choices=("random", "saliency", "self_attention", "lime", "shap"))
    p.add_argument("--level", choices=(LEVEL_UNIT, LEVEL_INTERACTION))
    p.add_argument("--index-mode", choices=(MODE_POSITIONAL, MODE_VALUE))
    p.add_argument("--budgets", help="comma-separated Top-K fractions")
    p.add_argument("--out", help="write the metric table as JSON")

    p = sub.add_parser("swap", help="cross-class byte swap experiment")
    common(p, checkpoint=True)
    p.add_argument("--checkpoint", required=True, action="append",
                   help="repeatable: evaluate transfer on several models")
    p.add_argument("--reports", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--out")
    return parser


_COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train,
             "explain": cmd_explain, "eval": cmd_eval, "swap": cmd_swap}


def main(argv=None):
    level = os.environ.get("XFLOW_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except XflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
