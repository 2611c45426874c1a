"""
A small nested cross-validation run
===================================

Segment CNNs are trained per fold; the aggregators only ever see embeddings
from CNNs that did not train on those utterances. Runs in well under a
minute on one core.
"""

# %%
import tempfile

from milser.pipeline import PipelineConfig, featurize_waves, probability_trace, run_experiment
from milser.synth import SynthSpec, generate_corpus, oracle_segment_labels

spec = SynthSpec(n_utterances=120, n_folds=4, witness_density=0.3, seed=0)
manifest, truth, waves = generate_corpus(spec, tempfile.mkdtemp(), write_audio=False)

cfg = PipelineConfig.from_dict({
    "body": ["maxpool2x4", "conv3x3:4", "relu", "maxpool2x2"],
    "segment_train": {"max_epochs": 6},
    "aggregator_train": {"batch_size": 16, "max_epochs": 20},
    "n_folds": 4,
    "inner": "folds",
    "kinds": ["avgpool", "dsingle", "feature", "maxrf"],
})
features = featurize_waves(waves, spec.sample_rate, cfg)

# %%
result = run_experiment(manifest, features, cfg)
print("segment models trained:", result.nested.n_models_trained)
print("leaks:", result.nested.leakage())
for kind, ua in result.summary().items():
    print(f"{kind:8s} UA {ua:.3f}")

# %%
# Segment probabilities for one test utterance, against the witness flags
uid = manifest.ids()[0]
probs = probability_trace(result.nested, uid)
flags = oracle_segment_labels(truth.spans[uid], len(probs))
label = truth.labels[uid]
for t in range(len(probs)):
    print(f"{t:2d} {'*' if flags[t] else ' '} {probs[t, label]:.2f}")
