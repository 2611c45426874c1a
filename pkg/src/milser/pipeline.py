"""End-to-end orchestration: audio -> log-Mel -> segments -> nested CV -> bag classifiers."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import FEATURE_DIM, HIDDEN, KINDS, train_aggregator
from .bagging import LOG_FLOOR, SEG_FRAMES, SHIFT_FRAMES, clamp_utterance, segment_frames, t_max_for
from .baselines import train_pooled_rf
from .dsp import AudioClip, DspConfig, featurize, read_wav
from .errors import ConfigError
from .eval import NestedResult, evaluate, make_fold_plan, nested_embedding_cv
from .neuralcore.optim import TrainConfig
from .neuralcore.segment import DEFAULT_BODY, SegmentDataset

log = logging.getLogger(__name__)

RF_KINDS = ("maxrf", "avgrf")
ALL_KINDS = KINDS + RF_KINDS


@dataclass
class PipelineConfig:
    max_seconds: float = 2.07
    t_max: int | None = None  # derived from max_seconds when left unset
    seg_frames: int = SEG_FRAMES
    shift_frames: int = SHIFT_FRAMES
    dsp: DspConfig = field(default_factory=DspConfig)
    body: tuple = DEFAULT_BODY
    segment_train: TrainConfig = field(default_factory=TrainConfig)
    aggregator_train: TrainConfig = field(default_factory=TrainConfig)
    hidden: int = HIDDEN
    feature_dim: int = FEATURE_DIM
    rf_trees: int = 200
    rf_depth: int = 16
    scheme: str = "cv10"
    n_folds: int | None = None
    inner: str = "random"
    inner_splits: int = 5
    seed: int = 0
    masked: bool = True
    kinds: tuple = ALL_KINDS

    def __post_init__(self):
        self.body = tuple(self.body)
        self.kinds = tuple(self.kinds)
        implied = t_max_for(self.max_seconds, self.seg_frames, self.shift_frames,
                            self.dsp.window_ms / 1000, self.dsp.hop_ms / 1000)
        if self.t_max is None:
            self.t_max = implied
        elif self.t_max != implied:
            raise ConfigError(f"t_max={self.t_max} inconsistent with max_seconds={self.max_seconds} "
                              f"(implies {implied})")
        if implied < 1:
            raise ConfigError(f"max_seconds={self.max_seconds} yields no complete segment")
        unknown = set(self.kinds) - set(ALL_KINDS)
        if unknown:
            raise ConfigError(f"unknown aggregator kinds {sorted(unknown)}")
        if self.inner not in ("random", "folds"):
            raise ConfigError(f"inner split mode must be 'random' or 'folds', got {self.inner!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["dsp"] = {f.name: getattr(self.dsp, f.name) for f in fields(self.dsp) if f.init}
        d["segment_train"] = self.segment_train.to_dict()
        d["aggregator_train"] = self.aggregator_train.to_dict()
        d["body"], d["kinds"] = list(self.body), list(self.kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "dsp" in d:
                d["dsp"] = DspConfig(**d["dsp"])
            for key in ("segment_train", "aggregator_train"):
                if key in d:
                    d[key] = TrainConfig(**d[key])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> PipelineConfig:
        d = self.to_dict()
        d["seed"] = seed
        d["segment_train"]["seed"] = seed
        d["aggregator_train"]["seed"] = seed
        return PipelineConfig.from_dict(d)


def load_config(path) -> PipelineConfig:
    """Read a YAML or JSON config file (JSON when the suffix is .json)."""
    text = Path(path).read_text()
    if Path(path).suffix == ".json":
        data = json.loads(text)
    else:
        import yaml

        data = yaml.safe_load(text)
    return PipelineConfig.from_dict(data or {})


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha1(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def content_hash(paths) -> str:
    """Git-style blob hash folded over a sorted list of files."""
    outer = hashlib.sha1()
    for p in sorted(str(p) for p in paths):
        data = Path(p).read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        outer.update(f"{blob} {Path(p).name}\n".encode())
    return outer.hexdigest()


# -- features and segments ------------------------------------------------------------

def utterance_features(clip: AudioClip, cfg: PipelineConfig) -> np.ndarray:
    """Clamped log-Mel frames (F_max, n_mels) as float32."""
    spec = clamp_utterance(featurize(clip, cfg.dsp), cfg.max_seconds)
    return spec.frames.astype(np.float32)


def featurize_waves(waves: dict, sample_rate: int, cfg: PipelineConfig) -> dict:
    return {uid: utterance_features(AudioClip(uid, x, sample_rate), cfg) for uid, x in waves.items()}


def featurize_manifest(manifest, root, cfg: PipelineConfig) -> dict:
    root = Path(root)
    return {r.utterance_id: utterance_features(read_wav(root / r.path, id=r.utterance_id), cfg)
            for r in manifest.records}


def build_segments(features: dict, labels: dict, cfg: PipelineConfig) -> SegmentDataset:
    X, y, utt, start = [], [], [], []
    for uid in sorted(features):
        w = segment_frames(features[uid], cfg.seg_frames, cfg.shift_frames, pad_value=LOG_FLOOR)
        X.append(w)
        y.append(np.full(len(w), labels[uid], dtype=np.int64))
        utt.extend([uid] * len(w))
        start.append(np.arange(len(w)) * cfg.shift_frames)
    return SegmentDataset(np.concatenate(X), np.concatenate(y), np.asarray(utt), np.concatenate(start))


# -- experiment -----------------------------------------------------------------------

@dataclass
class ExperimentResult:
    reports: dict  # kind -> EvalReport
    nested: NestedResult
    models: dict  # kind -> {fold: model}
    config: PipelineConfig

    def summary(self) -> dict:
        return {k: r.UA for k, r in self.reports.items()}


def train_fold_models(kind: str, nested: NestedResult, cfg: PipelineConfig, n_classes: int) -> dict:
    models = {}
    for of in nested.folds:
        if kind in RF_KINDS:
            models[of.fold] = train_pooled_rf(of.train, kind[:3], cfg.rf_trees, cfg.rf_depth,
                                              cfg.seed + of.fold, n_classes, cfg.masked)
        else:
            tc = TrainConfig(**{**cfg.aggregator_train.to_dict(), "seed": cfg.aggregator_train.seed + of.fold})
            models[of.fold], _ = train_aggregator(kind, of.train, tc, n_classes, cfg.hidden,
                                                  cfg.feature_dim, cfg.masked)
    return models


def run_experiment(manifest, features: dict, cfg: PipelineConfig, plan=None) -> ExperimentResult:
    """Nested CV embeddings, then every configured bag classifier, evaluated per fold."""
    labels = {r.utterance_id: r.label_index for r in manifest.records}
    plan = plan or make_fold_plan(manifest, cfg.scheme, n_folds=cfg.n_folds)
    K = manifest.n_classes
    segments = build_segments(features, labels, cfg)
    nested = nested_embedding_cv(segments, labels, plan, cfg.segment_train, K, cfg.t_max, cfg.body,
                                 cfg.inner, cfg.inner_splits)
    leaks = nested.leakage()
    if leaks:
        raise RuntimeError(f"embedding leakage detected for {len(leaks)} utterances")
    test_bags = {of.fold: of.test for of in nested.folds}
    reports, models = {}, {}
    for kind in cfg.kinds:
        models[kind] = train_fold_models(kind, nested, cfg, K)
        reports[kind] = evaluate(models[kind], test_bags, K, manifest.classes, label=kind)
        log.info("%s: UA %.4f", kind, reports[kind].UA)
    return ExperimentResult(reports, nested, models, cfg)


def probability_trace(nested: NestedResult, utterance_id: str) -> np.ndarray:
    """Per-segment class probabilities (T, K) for a test utterance, from its outer model."""
    for of in nested.folds:
        if utterance_id in of.test_probs:
            return of.test_probs[utterance_id]
    raise KeyError(utterance_id)

