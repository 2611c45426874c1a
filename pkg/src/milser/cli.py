"""Batch entry point: ``python -m milser <command> ...``.

Stages communicate through files under one work directory (``--out``)::

    synth            corpus dir: WAVs, manifest.tsv, truth.tsv
    featurize        log-Mel feature store (one record per utterance)
    train-segments   nested-CV segment CNNs: segment_models/*.mils + nested.json
    embed            bag store bags.milf (per fold, train/test roles, plus probability traces)
    train-attention  per-fold bag classifiers under models/<kind>/
    evaluate         reports/<kind>.csv and reports/<kind>.jsonl
    report           reports/trace_<utterance>.csv (+ attention weights for attention kinds)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .bagging import assemble_bag, stack_bags
from .errors import ConfigError, MilserError, NotFound
from .eval import evaluate, make_fold_plan, nested_embedding_cv
from .pipeline import ALL_KINDS, RF_KINDS, PipelineConfig
from .store import (FeatureStore, load_forest, load_model, read_manifest, save_forest, save_model)
from .synth import SynthSpec, generate_corpus

log = logging.getLogger("milser")


class StageError(Exception):
    pass


def _refuse_overwrite(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise StageError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    for p in existing:
        Path(p).unlink() if Path(p).is_file() else None


def _resolve_config(args) -> PipelineConfig:
    cfg = pipeline.load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    d = cfg.to_dict()
    if getattr(args, "scheme", None):
        d["scheme"] = args.scheme
    if getattr(args, "masked", None) is not None:
        d["masked"] = args.masked
    cfg = PipelineConfig.from_dict(d)
    log.info("resolved config %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _log_inputs(*paths):
    files = [p for p in paths if p and Path(p).is_file()]
    if files:
        log.info("input hash %s (%s)", pipeline.content_hash(files), ", ".join(str(f) for f in files))


def _need(path, what):
    if not Path(path).exists():
        raise StageError(f"missing {what}: {path}")
    return Path(path)


# -- commands -------------------------------------------------------------------------

def cmd_synth(args):
    spec = SynthSpec(n_classes=args.n_classes, n_utterances=args.n_utterances,
                     utterance_seconds=args.seconds, witness_density=args.density, snr_db=args.snr,
                     seed=args.seed or 0, n_folds=args.n_folds)
    out = Path(args.out)
    _refuse_overwrite([out / "manifest.tsv", out / "truth.tsv"], args.force)
    log.info("synth spec %s", json.dumps(spec.to_dict(), sort_keys=True))
    manifest, _, _ = generate_corpus(spec, out)
    print(f"wrote {len(manifest)} utterances to {out}")


def cmd_featurize(args):
    cfg = _resolve_config(args)
    manifest_path = _need(args.manifest, "manifest")
    _log_inputs(manifest_path)
    manifest = read_manifest(manifest_path)
    _refuse_overwrite([args.store], args.force)
    feats = pipeline.featurize_manifest(manifest, manifest_path.parent, cfg)
    with FeatureStore(args.store, "w") as st:
        for r in manifest.records:
            st.put(r.utterance_id, feats[r.utterance_id], {"label": r.label_index})
    print(f"featurized {len(feats)} utterances into {args.store}")


def _load_features(store_path, manifest):
    with FeatureStore(_need(store_path, "feature store"), "r") as st:
        return {r.utterance_id: st.get(r.utterance_id) for r in manifest.records}


def cmd_train_segments(args):
    cfg = _resolve_config(args)
    manifest_path = _need(args.manifest, "manifest")
    _log_inputs(manifest_path, args.store)
    manifest = read_manifest(manifest_path)
    out = Path(args.out)
    _refuse_overwrite([out / "nested.json"], args.force)
    feats = _load_features(args.store, manifest)
    labels = {r.utterance_id: r.label_index for r in manifest.records}
    plan = make_fold_plan(manifest, cfg.scheme, n_folds=cfg.n_folds)
    segments = pipeline.build_segments(feats, labels, cfg)
    nested = nested_embedding_cv(segments, labels, plan, cfg.segment_train, manifest.n_classes, cfg.t_max,
                                 cfg.body, cfg.inner, cfg.inner_splits)
    leaks = nested.leakage()
    if leaks:
        raise StageError(f"leakage audit failed for {len(leaks)} utterances")
    model_dir = out / "segment_models"
    model_dir.mkdir(parents=True, exist_ok=True)
    for key, model in sorted(nested.models.items()):
        save_model(model_dir / f"{key}.mils", model, cfg.segment_train.to_dict(),
                   {"training_utterances": len(nested.model_training_sets[key])})
    doc = {
        "config": cfg.to_dict(),
        "classes": manifest.classes,
        "plan": {"scheme": plan.scheme, "assignments": plan.assignments},
        "training_sets": {k: sorted(v) for k, v in nested.model_training_sets.items()},
        "folds": [{"fold": of.fold, "source": of.source, "test": sorted(of.test_probs)} for of in nested.folds],
    }
    (out / "nested.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    print(f"trained {nested.n_models_trained} segment models over {len(nested.folds)} folds; audit clean")


def cmd_embed(args):
    """Embed every utterance with the model nested.json assigns it, per fold and role."""
    out = Path(args.out)
    doc = _nested_doc(out)
    cfg = PipelineConfig.from_dict(doc["config"])
    _log_inputs(out / "nested.json", args.store)
    _refuse_overwrite([out / "bags.milf"], args.force)
    trained_on = {k: set(v) for k, v in doc["training_sets"].items()}
    models = {}
    n = 0
    with FeatureStore(_need(args.store, "feature store"), "r") as st, FeatureStore(out / "bags.milf", "w") as bags:
        for fd in doc["folds"]:
            test = set(fd["test"])
            for uid in sorted(fd["source"]):
                key = fd["source"][uid]
                if uid in trained_on[key]:
                    raise StageError(f"leakage: {uid} embedded by {key}, which trained on it")
                if key not in models:
                    models[key], _ = load_model(_need(out / "segment_models" / f"{key}.mils", "segment model"))
                frames, attrs = st.get_with_attrs(uid)
                segs = pipeline.build_segments({uid: frames}, {uid: attrs["label"]}, cfg)
                emb, probs = models[key].embed(segs.X)
                role = "test" if uid in test else "train"
                bags.put(f"{fd['fold']}/{role}/{uid}", emb[: cfg.t_max],
                         {"label": attrs["label"], "fold": fd["fold"], "role": role, "model": key})
                if role == "test":
                    bags.put(f"probs/{uid}", probs, {"fold": fd["fold"]})
                n += 1
    print(f"wrote {n} bags to {out / 'bags.milf'}")


def _load_bags(out: Path, t_max: int):
    """Per fold (train BagSet, test BagSet) from the bag store."""
    parts: dict = {}
    with FeatureStore(_need(out / "bags.milf", "bag store"), "r") as st:
        for rid in st.ids():
            if rid.startswith("probs/"):
                continue
            fold, role, uid = rid.split("/", 2)
            emb, attrs = st.get_with_attrs(rid)
            parts.setdefault(int(fold), {}).setdefault(role, []).append(assemble_bag(emb, attrs["label"], t_max, uid))
    return {f: (stack_bags(sorted(d.get("train", []), key=lambda b: b.utterance_id)),
                stack_bags(sorted(d["test"], key=lambda b: b.utterance_id))) for f, d in sorted(parts.items())}


def _nested_doc(out):
    return json.loads(_need(Path(out) / "nested.json", "nested CV record (run train-segments)").read_text())


def _model_path(out, kind, fold):
    return Path(out) / "models" / kind / f"fold{fold}.{'milr' if kind in RF_KINDS else 'mils'}"


def cmd_train_attention(args):
    out = Path(args.out)
    doc = _nested_doc(out)
    cfg = _resolve_config(args) if args.config else PipelineConfig.from_dict(doc["config"])
    if args.masked is not None:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), "masked": args.masked})
    kind = args.kind
    folds = _load_bags(out, cfg.t_max)
    paths = [_model_path(out, kind, f) for f in folds]
    _refuse_overwrite(paths, args.force)
    paths[0].parent.mkdir(parents=True, exist_ok=True)
    K = len(doc["classes"])
    from .attention import train_aggregator
    from .baselines import train_pooled_rf
    from .neuralcore.optim import TrainConfig

    for (fold, (train, _)), path in zip(folds.items(), paths):
        if kind in RF_KINDS:
            model = train_pooled_rf(train, kind[:3], cfg.rf_trees, cfg.rf_depth, cfg.seed + fold, K, cfg.masked)
            save_forest(path, model.forest)
        else:
            tc = TrainConfig(**{**cfg.aggregator_train.to_dict(), "seed": cfg.aggregator_train.seed + fold})
            model, _ = train_aggregator(kind, train, tc, K, cfg.hidden, cfg.feature_dim, cfg.masked)
            save_model(path, model, tc.to_dict(), {"fold": fold})
    print(f"trained {kind} on {len(folds)} folds")


def _load_fold_model(out, kind, fold, masked):
    from .baselines import PooledForest

    path = _need(_model_path(out, kind, fold), f"{kind} model for fold {fold} (run train-attention)")
    if kind in RF_KINDS:
        return PooledForest(load_forest(path), kind[:3], masked)
    return load_model(path)[0]


def cmd_evaluate(args):
    out = Path(args.out)
    doc = _nested_doc(out)
    cfg = PipelineConfig.from_dict(doc["config"])
    kind = args.kind
    folds = _load_bags(out, cfg.t_max)
    masked = cfg.masked if args.masked is None else args.masked
    models = {f: _load_fold_model(out, kind, f, masked) for f in folds}
    report = evaluate(models, {f: test for f, (_, test) in folds.items()}, len(doc["classes"]),
                      doc["classes"], label=kind)
    rep_dir = out / "reports"
    rep_dir.mkdir(exist_ok=True)
    paths = [rep_dir / f"{kind}.csv", rep_dir / f"{kind}.jsonl"]
    _refuse_overwrite(paths, args.force)
    report.to_csv(paths[0])
    paths[1].write_text(report.to_lines())
    print(f"{kind}: UA {report.UA:.4f}")


def cmd_report(args):
    out = Path(args.out)
    doc = _nested_doc(out)
    uid = args.utterance
    with FeatureStore(_need(out / "bags.milf", "bag store"), "r") as st:
        try:
            probs, attrs = st.get_with_attrs(f"probs/{uid}")
        except NotFound:
            raise StageError(f"no probability trace for utterance {uid!r}") from None
    rep_dir = out / "reports"
    rep_dir.mkdir(exist_ok=True)
    path = rep_dir / f"trace_{uid}.csv"
    _refuse_overwrite([path], args.force)
    write_trace(path, probs, doc["classes"], doc["config"].get("shift_frames", 6))
    print(f"wrote {path}")
    if args.kind in ("dsingle", "dmulti", "feature"):
        cfg = PipelineConfig.from_dict(doc["config"])
        fold = int(attrs["fold"])
        _, test = _load_bags(out, cfg.t_max)[fold]
        i = test.ids.index(uid)
        model = _load_fold_model(out, args.kind, fold, cfg.masked)
        w = model.attention_weights(test.X[i:i + 1], test.mask[i:i + 1])
        wpath = rep_dir / f"attention_{args.kind}_{uid}.csv"
        _refuse_overwrite([wpath], args.force)
        write_attention(wpath, w, int(test.mask[i].sum()))
        print(f"wrote {wpath}")


def write_trace(path, probs, classes, shift_frames=6):
    """One row per segment: index, start frame, class probabilities."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "start_frame", *[f"p_{c}" for c in classes]])
        for t, row in enumerate(np.asarray(probs, dtype=np.float64)):
            w.writerow([t, t * shift_frames, *[repr(float(v)) for v in row]])


def write_attention(path, weights, n_valid):
    mats = weights if isinstance(weights, tuple) else (weights,)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["module", "segment", *[f"w{j}" for j in range(mats[0].shape[-1])]])
        for m, mat in enumerate(mats):
            for t in range(n_valid):
                w.writerow([m, t, *[repr(float(v)) for v in mat[0, t]]])


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r[2:]] for r in rows[1:]])


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="milser", description="Weak-label MIL pipeline over log-Mel segments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="YAML or JSON pipeline config")
        if "manifest" in flags:
            sp.add_argument("--manifest", required=True)
        if "store" in flags:
            sp.add_argument("--store", required=True, help="feature store path")
        if "out" in flags:
            sp.add_argument("--out", required=True, help="work directory")
        if "seed" in flags:
            sp.add_argument("--seed", type=int)
        if "scheme" in flags:
            sp.add_argument("--scheme", choices=("cv10", "session5", "custom"))
        if "kind" in flags:
            sp.add_argument("--kind", choices=ALL_KINDS, required="report" not in sp.prog)
        if "mask" in flags:
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--mask", dest="masked", action="store_const", const=True)
            g.add_argument("--unmasked", dest="masked", action="store_const", const=False)
            sp.set_defaults(masked=None)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    common(sp, "out", "seed")
    sp.add_argument("--n-classes", type=int, default=4)
    sp.add_argument("--n-utterances", type=int, default=600)
    sp.add_argument("--seconds", type=float, default=2.07)
    sp.add_argument("--density", type=float, default=0.2)
    sp.add_argument("--snr", type=float, default=0.0)
    sp.add_argument("--n-folds", type=int, default=10)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("featurize", help="WAV -> log-Mel records")
    common(sp, "config", "manifest", "store")
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("train-segments", help="nested-CV segment CNN training")
    common(sp, "config", "manifest", "store", "out", "seed", "scheme")
    sp.set_defaults(func=cmd_train_segments)

    sp = sub.add_parser("embed", help="re-embed test bags from saved segment models")
    common(sp, "store", "out")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("train-attention", help="per-fold bag classifier training")
    common(sp, "config", "out", "seed", "kind", "mask")
    sp.set_defaults(func=cmd_train_attention)

    sp = sub.add_parser("evaluate", help="pooled UA report and confusion CSV")
    common(sp, "out", "kind", "mask")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="per-segment probability trace for one utterance")
    sp.add_argument("utterance")
    common(sp, "out", "kind")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (StageError, MilserError, OSError, ValueError) as exc:
        kind = "config" if isinstance(exc, ConfigError) else type(exc).__name__
        print(f"milser {args.command}: {kind}: {exc}", file=sys.stderr)
        return 2
    return 0

