import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milser.errors import ConfigError, EmptyClass, FoldMismatch, MissingField
from milser.eval import (
    ConfusionMatrix,
    assign_folds,
    evaluate,
    make_fold_plan,
    nested_embedding_cv,
    read_confusion_csv,
    unweighted_accuracy,
)
from milser.neuralcore import TrainConfig
from milser.neuralcore.segment import SegmentDataset
from milser.store import Manifest, ManifestRecord

TINY_BODY = ("maxpool2x4", "conv3x3:2", "relu", "maxpool2x2")


def manifest(n=20, k=2, n_folds=None, sessions=None):
    recs = []
    for i in range(n):
        recs.append(ManifestRecord(f"u{i}.wav", f"u{i:02d}", f"c{i % k}", i % k, speaker=f"s{i % 4}",
                                   session=sessions[i % len(sessions)] if sessions else "",
                                   fold=(i % n_folds) if n_folds else -1))
    return Manifest([f"c{j}" for j in range(k)], recs)


class Predictor:
    def __init__(self, pred):
        self.pred = np.asarray(pred)

    def predict_bags(self, bags):
        return self.pred


class FakeBags:
    def __init__(self, y):
        self.y = np.asarray(y)


class TestUnweightedAccuracy:
    def test_identity(self):
        assert unweighted_accuracy(ConfusionMatrix(np.diag([5, 7, 1]))) == 1.0

    def test_hand_example(self):
        cm = ConfusionMatrix(np.array([[8, 2], [5, 5]]))
        assert unweighted_accuracy(cm) == pytest.approx(0.65, abs=1e-12)
        np.testing.assert_allclose(cm.recalls(), [0.8, 0.5])

    def test_imbalanced_differs_from_accuracy(self):
        cm = ConfusionMatrix(np.array([[90, 0], [10, 0]]))
        assert unweighted_accuracy(cm) == pytest.approx(0.5)
        assert np.trace(cm.counts) / cm.total == pytest.approx(0.9)

    @given(st.integers(2, 6), st.lists(st.integers(1, 30), min_size=6, max_size=6), st.integers(0, 5))
    @settings(max_examples=50)
    def test_constant_classifier_is_chance(self, k, support, c):
        c = c % k
        y = np.repeat(np.arange(k), support[:k])
        cm = ConfusionMatrix.from_predictions(y, np.full_like(y, c), k)
        assert unweighted_accuracy(cm) == pytest.approx(1.0 / k, abs=1e-12)

    def test_empty_class_strict(self):
        cm = ConfusionMatrix(np.array([[3, 0], [0, 0]]))
        with pytest.raises(EmptyClass):
            unweighted_accuracy(cm)
        assert unweighted_accuracy(cm, strict=False) == 1.0

    def test_from_predictions(self):
        cm = ConfusionMatrix.from_predictions([0, 0, 1, 2], [0, 1, 1, 0], 3)
        np.testing.assert_array_equal(cm.counts, [[1, 1, 0], [0, 1, 0], [1, 0, 0]])
        assert cm.total == 4


class TestFoldPlans:
    def test_cv10(self):
        plan = make_fold_plan(manifest(30, n_folds=10), "cv10")
        assert plan.folds == list(range(10))
        assert sorted(u for f in plan.folds for u in plan.members(f)) == manifest(30).ids()

    def test_cv10_wrong_count(self):
        with pytest.raises(ConfigError):
            make_fold_plan(manifest(30, n_folds=5), "cv10")
        assert len(make_fold_plan(manifest(30, n_folds=5), "cv10", n_folds=5).folds) == 5

    def test_cv10_missing_fold(self):
        with pytest.raises(MissingField):
            make_fold_plan(manifest(10), "cv10")

    def test_session5_sorted(self):
        m = manifest(20, sessions=["Ses05", "Ses01", "Ses03", "Ses02", "Ses04"])
        plan = make_fold_plan(m, "session5")
        by_id = m.by_id()
        for u, f in plan.assignments.items():
            assert by_id[u].session == f"Ses0{f + 1}"

    def test_session5_missing(self):
        with pytest.raises(MissingField):
            make_fold_plan(manifest(10), "session5")

    def test_custom_must_partition(self):
        m = manifest(6)
        plan = make_fold_plan(m, "custom", {u: i % 2 for i, u in enumerate(m.ids())})
        assert plan.folds == [0, 1]
        with pytest.raises(FoldMismatch):
            make_fold_plan(m, "custom", {u: 0 for u in m.ids()[:-1]})
        with pytest.raises(MissingField):
            make_fold_plan(m, "custom")

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            make_fold_plan(manifest(4), "loso")

    @pytest.mark.parametrize("by", ["random", "speaker"])
    def test_assign_folds(self, by):
        m = manifest(40, k=2)
        assign_folds(m, 4, by=by, seed=1)
        folds = [r.fold for r in m.records]
        assert set(folds) == {0, 1, 2, 3}
        if by == "speaker":
            for s in {r.speaker for r in m.records}:
                assert len({r.fold for r in m.records if r.speaker == s}) == 1
        else:
            for f in range(4):
                labels = [r.label_index for r in m.records if r.fold == f]
                assert labels.count(0) == labels.count(1) == 5


class TestEvaluate:
    def test_pooled_confusion(self):
        models = {0: Predictor([0, 1]), 1: Predictor([0, 0, 1])}
        bags = {0: FakeBags([0, 1]), 1: FakeBags([0, 1, 1])}
        rep = evaluate(models, bags, 2, ["neu", "ang"], label="toy")
        np.testing.assert_array_equal(rep.confusion.counts, [[2, 0], [1, 2]])
        assert rep.UA == pytest.approx((1.0 + 2 / 3) / 2)
        assert rep.fold_UA == {0: 1.0, 1: pytest.approx(0.75)}

    def test_fold_mismatch(self):
        with pytest.raises(FoldMismatch):
            evaluate({0: Predictor([0])}, {1: FakeBags([0])}, 2)

    def test_csv_round_trip(self, tmp_path):
        rep = evaluate({0: Predictor([0, 1, 1, 2])}, {0: FakeBags([0, 1, 2, 2])}, 3, ["a", "b", "c"])
        rep.to_csv(tmp_path / "r.csv")
        names, counts, ua = read_confusion_csv(tmp_path / "r.csv")
        assert names == ["a", "b", "c"]
        np.testing.assert_array_equal(counts, rep.confusion.counts)
        assert ua == rep.UA
        lines = rep.to_lines().splitlines()
        assert lines[0].startswith("{") and '"type": "summary"' in lines[0]
        assert sum('"confusion"' in ln for ln in lines) == 9


def tiny_segments(n_utt=12, per=3, k=2, seed=0):
    rng = np.random.default_rng(seed)
    X, y, utt, start = [], [], [], []
    labels = {}
    for i in range(n_utt):
        uid = f"u{i:02d}"
        labels[uid] = i % k
        for s in range(per):
            seg = rng.normal(size=(32, 64)).astype(np.float32)
            seg[:, 10 * (i % k): 10 * (i % k) + 10] += 3.0
            X.append(seg)
            y.append(i % k)
            utt.append(uid)
            start.append(6 * s)
    data = SegmentDataset(np.stack(X), np.array(y), np.array(utt), np.array(start))
    return data, labels


def run_nested(inner):
    data, labels = tiny_segments()
    plan = make_fold_plan(_plan_manifest(labels), "custom", {u: int(u[1:]) % 3 for u in labels})
    cfg = TrainConfig(max_epochs=1, batch_size=8)
    return labels, plan, nested_embedding_cv(data, labels, plan, cfg, 2, t_max=4, body=TINY_BODY,
                                             inner=inner, inner_splits=2)


@pytest.fixture(scope="module")
def run():
    return run_nested("folds")


class TestNestedCV:
    def test_no_leakage(self, run):
        _, _, res = run
        assert res.leakage() == []
        for of in res.folds:
            for uid, key in of.source.items():
                assert uid not in res.model_training_sets[key]

    def test_one_bag_per_utterance(self, run):
        labels, plan, res = run
        for of in res.folds:
            assert sorted(of.test.ids) == sorted(plan.members(of.fold))
            assert sorted(of.train.ids) == sorted(u for u in labels if plan.assignments[u] != of.fold)
            assert of.train.X.shape[1] == 4 and of.test.mask.sum(axis=1).tolist() == [3] * len(of.test)
            assert set(of.test_probs) == set(of.test.ids)

    def test_inner_folds_share_models(self, run):
        # 3 outer models on two folds each, 3 inner models on one fold each
        _, _, res = run
        assert res.n_models_trained == 6
        assert sorted(len(s) for s in res.model_training_sets.values()) == [4, 4, 4, 8, 8, 8]

    def test_outer_model_never_saw_test_fold(self, run):
        _, plan, res = run
        for of in res.folds:
            key = of.source[of.test.ids[0]]
            assert res.model_training_sets[key] == frozenset(u for u in plan.assignments
                                                             if plan.assignments[u] != of.fold)

    def test_random_inner_split_is_leak_free(self):
        labels, _, res = run_nested("random")
        assert res.leakage() == []
        # 3 outer models plus 2 inner models per outer fold
        assert res.n_models_trained == 9
        for of in res.folds:
            assert len(of.train) + len(of.test) == len(labels)


def _plan_manifest(labels):
    return Manifest(["c0", "c1"], [ManifestRecord(f"{u}.wav", u, f"c{k}", k) for u, k in sorted(labels.items())])
