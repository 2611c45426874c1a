"""Cross-validation plans, the nested embedding CV, and unweighted-accuracy reports."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .bagging import BagSet, assemble_bag, stack_bags
from .errors import ConfigError, EmptyClass, FoldMismatch, MissingField
from .neuralcore.optim import TrainConfig
from .neuralcore.segment import DEFAULT_BODY, SegmentDataset, SegmentModel, train_segment_model

log = logging.getLogger(__name__)

SCHEMES = ("cv10", "session5", "custom")


# -- fold plans ----------------------------------------------------------------------

@dataclass
class FoldPlan:
    scheme: str
    assignments: dict  # utterance_id -> fold index

    @property
    def folds(self) -> list:
        return sorted(set(self.assignments.values()))

    def members(self, fold) -> list:
        return [u for u, f in self.assignments.items() if f == fold]

    def check_partition(self, ids) -> None:
        ids = set(ids)
        missing = ids - set(self.assignments)
        extra = set(self.assignments) - ids
        if missing or extra:
            raise FoldMismatch(
                f"fold plan is not a partition: {len(missing)} utterances unassigned, {len(extra)} unknown"
            )


def make_fold_plan(manifest, scheme: str, assignments: dict | None = None, n_folds: int | None = None) -> FoldPlan:
    """Build a fold plan from manifest metadata.

    ``cv10``     leave-one-fold-out over the manifest's fold field (10 folds
                 unless ``n_folds`` says otherwise).
    ``session5`` leave-one-session-out; sessions sorted by name become folds.
    ``custom``   explicit ``assignments`` that must cover the manifest exactly.
    """
    ids = manifest.ids()
    if scheme == "cv10":
        expected = n_folds or 10
        folds = {}
        for r in manifest.records:
            if r.fold is None or r.fold < 0:
                raise MissingField(f"{r.utterance_id}: fold field required by scheme cv10")
            folds[r.utterance_id] = int(r.fold)
        if len(set(folds.values())) != expected:
            raise ConfigError(f"scheme cv10 expects {expected} folds, manifest has {len(set(folds.values()))}")
        plan = FoldPlan(scheme, folds)
    elif scheme == "session5":
        sessions = sorted({r.session for r in manifest.records})
        if any(not r.session for r in manifest.records):
            raise MissingField("session field required by scheme session5")
        expected = n_folds or 5
        if len(sessions) != expected:
            raise ConfigError(f"scheme session5 expects {expected} sessions, manifest has {len(sessions)}")
        index = {s: i for i, s in enumerate(sessions)}
        plan = FoldPlan(scheme, {r.utterance_id: index[r.session] for r in manifest.records})
    elif scheme == "custom":
        if assignments is None:
            raise MissingField("custom scheme needs explicit assignments")
        plan = FoldPlan(scheme, {k: int(v) for k, v in assignments.items()})
    else:
        raise ConfigError(f"unknown fold scheme {scheme!r}; expected one of {SCHEMES}")
    plan.check_partition(ids)
    return plan


def assign_folds(manifest, n_folds: int, by: str = "random", seed: int = 0) -> None:
    """Fill the manifest's fold field in place, class-stratified.

    ``by="random"`` deals each class's utterances round-robin after a seeded
    shuffle; ``by="speaker"`` keeps every speaker inside one fold.
    """
    rng = np.random.default_rng(seed)
    if by == "random":
        for k in range(manifest.n_classes):
            recs = [r for r in manifest.records if r.label_index == k]
            for j, i in enumerate(rng.permutation(len(recs))):
                recs[i].fold = j % n_folds
    elif by == "speaker":
        speakers = sorted({r.speaker for r in manifest.records})
        order = rng.permutation(len(speakers))
        fold_of = {speakers[i]: j % n_folds for j, i in enumerate(order)}
        for r in manifest.records:
            r.fold = fold_of[r.speaker]
    else:
        raise ValueError(f"unknown fold strategy {by!r}")


# -- metrics --------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K), rows true, columns predicted

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes) -> ConfusionMatrix:
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recalls(self, strict=True) -> np.ndarray:
        support = self.counts.sum(axis=1)
        if strict and np.any(support == 0):
            raise EmptyClass(f"classes without true instances: {np.flatnonzero(support == 0).tolist()}")
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.diag(self.counts) / support


def unweighted_accuracy(cm: ConfusionMatrix, strict: bool = True) -> float:
    """Mean per-class recall. With ``strict=False`` absent classes are skipped."""
    r = cm.recalls(strict)
    return float(np.nanmean(r))


@dataclass
class EvalReport:
    UA: float
    recalls: np.ndarray
    confusion: ConfusionMatrix
    fold_UA: dict = field(default_factory=dict)
    class_names: list = field(default_factory=list)
    label: str = ""

    def to_csv(self, path) -> None:
        names = self.class_names or [str(k) for k in range(len(self.recalls))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true", *[f"pred_{n}" for n in names], "recall"])
            for k, name in enumerate(names):
                w.writerow([name, *self.confusion.counts[k].tolist(), repr(float(self.recalls[k]))])
            w.writerow(["UA", *[""] * len(names), repr(float(self.UA))])

    def to_lines(self) -> str:
        """Line-oriented JSON records: summary, per-fold UA, recalls, confusion cells."""
        names = self.class_names or [str(k) for k in range(len(self.recalls))]
        rows = [{"type": "summary", "label": self.label, "UA": float(self.UA), "n": self.confusion.total}]
        rows += [{"type": "fold", "fold": int(f), "UA": float(u)} for f, u in sorted(self.fold_UA.items())]
        rows += [{"type": "recall", "class": n, "value": float(r)} for n, r in zip(names, self.recalls)]
        rows += [{"type": "confusion", "true": names[i], "pred": names[j], "count": int(self.confusion.counts[i, j])}
                 for i in range(len(names)) for j in range(len(names))]
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def read_confusion_csv(path) -> tuple[list, np.ndarray, float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = [r[0] for r in rows[1:-1]]
    counts = np.array([[int(v) for v in r[1:-1]] for r in rows[1:-1]], dtype=np.int64)
    return names, counts, float(rows[-1][-1])


def evaluate(models: dict, bags: dict, n_classes: int, class_names=None, label="") -> EvalReport:
    """Pool every fold's test predictions into one confusion matrix.

    ``models`` and ``bags`` are both keyed by fold; a model is anything with
    ``predict_bags(BagSet) -> labels``.
    """
    if set(models) != set(bags):
        raise FoldMismatch(f"models for folds {sorted(models)} but bags for folds {sorted(bags)}")
    y_true, y_pred, fold_ua = [], [], {}
    for fold in sorted(bags):
        test = bags[fold]
        pred = np.asarray(models[fold].predict_bags(test))
        y_true.append(test.y)
        y_pred.append(pred)
        fold_ua[fold] = unweighted_accuracy(ConfusionMatrix.from_predictions(test.y, pred, n_classes), strict=False)
    cm = ConfusionMatrix.from_predictions(np.concatenate(y_true), np.concatenate(y_pred), n_classes)
    return EvalReport(unweighted_accuracy(cm), cm.recalls(), cm, fold_ua, list(class_names or []), label)


# -- nested CV for embeddings ----------------------------------------------------------------

@dataclass
class OuterFold:
    fold: int
    train: BagSet  # embeddings from inner models that never saw these utterances
    test: BagSet  # embeddings from the outer model trained on every other fold
    test_probs: dict  # utterance_id -> (T, K) segment probabilities from the outer model
    outer_model: SegmentModel
    source: dict  # utterance_id -> key of the model that embedded it


@dataclass
class NestedResult:
    folds: list
    model_training_sets: dict  # model key -> frozenset of training utterance ids
    n_models_trained: int
    models: dict = field(default_factory=dict)  # model key -> SegmentModel

    def leakage(self) -> list:
        """(utterance, model key) pairs where the embedding model trained on that utterance."""
        bad = []
        for of in self.folds:
            for uid, key in of.source.items():
                if uid in self.model_training_sets[key]:
                    bad.append((uid, key))
        return bad


def _inner_partition(train_ids, plan: FoldPlan, outer_fold, inner, inner_splits, labels, rng):
    """Split the outer-training utterances into inner held-out groups."""
    if inner == "folds":
        return [sorted(u for u in train_ids if plan.assignments[u] == f)
                for f in plan.folds if f != outer_fold]
    if inner == "random":
        groups = [[] for _ in range(inner_splits)]
        by_class = {}
        for u in sorted(train_ids):
            by_class.setdefault(labels[u], []).append(u)
        offset = 0
        for k in sorted(by_class):
            members = by_class[k]
            for j, i in enumerate(rng.permutation(len(members))):
                groups[(j + offset) % inner_splits].append(members[i])
            offset += len(members)
        return [sorted(g) for g in groups]
    raise ConfigError(f"unknown inner split mode {inner!r}")


def _bags_for(ids, seg: SegmentDataset, rows_of, emb, probs, labels, t_max):
    bags, prob_map = [], {}
    for u in ids:
        rows = rows_of[u]
        bags.append(assemble_bag(emb[rows], labels[u], t_max, u))
        prob_map[u] = probs[rows]
    return stack_bags(bags), prob_map


def nested_embedding_cv(segments: SegmentDataset, labels: dict, plan: FoldPlan, cfg: TrainConfig, n_classes: int,
                        t_max: int, body=DEFAULT_BODY, inner="random", inner_splits=5) -> NestedResult:
    """Produce leakage-free bag datasets for every outer fold.

    For outer fold i, the other folds are split again; each inner held-out
    part is embedded by a CNN trained on the rest of the outer-training data,
    and fold i itself is embedded by a CNN trained on all other folds. Models
    whose training utterance sets coincide are trained once and reused.
    """
    uids = segments.utterance
    rows_of = {}
    for i, u in enumerate(uids):
        rows_of.setdefault(u, []).append(i)
    rows_of = {u: np.asarray(r) for u, r in rows_of.items()}
    plan.check_partition(rows_of)

    cache: dict = {}
    training_sets: dict = {}

    def model_for(train_ids):
        key_set = frozenset(train_ids)
        if key_set not in cache:
            key = f"m{len(cache)}"
            idx = np.concatenate([rows_of[u] for u in sorted(key_set)])
            # one init seed for every model keeps their embedding spaces comparable
            model, history = train_segment_model(segments.subset(idx), n_classes, cfg, body)
            log.info("segment model %s: %d utterances, %d epochs (best %d)", key, len(key_set),
                     history.n_epochs, history.best_epoch)
            cache[key_set] = (key, model)
            training_sets[key] = key_set
        return cache[key_set]

    def embed(model, ids):
        idx = np.concatenate([rows_of[u] for u in ids])
        emb, probs = model.embed(segments.X[idx])
        out_e = np.empty((len(segments), emb.shape[1]), dtype=emb.dtype)
        out_p = np.empty((len(segments), probs.shape[1]))
        out_e[idx], out_p[idx] = emb, probs
        return out_e, out_p

    folds = []
    for fold in plan.folds:
        rng = np.random.default_rng(cfg.seed + 1000 + fold)
        test_ids = sorted(plan.members(fold))
        train_ids = sorted(u for u in rows_of if plan.assignments[u] != fold)
        source = {}

        okey, outer = model_for(train_ids)
        e, p = embed(outer, test_ids)
        test_bags, test_probs = _bags_for(test_ids, segments, rows_of, e, p, labels, t_max)
        source.update({u: okey for u in test_ids})

        train_parts = []
        for held in _inner_partition(train_ids, plan, fold, inner, inner_splits, labels, rng):
            if not held:
                continue
            rest = sorted(set(train_ids) - set(held))
            ikey, inner_model = model_for(rest)
            e, p = embed(inner_model, held)
            bags, _ = _bags_for(held, segments, rows_of, e, p, labels, t_max)
            train_parts.append(bags)
            source.update({u: ikey for u in held})
        order = np.argsort(np.concatenate([np.asarray(b.ids) for b in train_parts]), kind="stable")
        train_bags = BagSet(
            [u for b in train_parts for u in b.ids],
            np.concatenate([b.X for b in train_parts]),
            np.concatenate([b.mask for b in train_parts]),
            np.concatenate([b.y for b in train_parts]),
        ).subset(order)
        folds.append(OuterFold(fold, train_bags, test_bags, test_probs, outer, source))
    return NestedResult(folds, training_sets, len(cache), {key: m for key, m in cache.values()})
