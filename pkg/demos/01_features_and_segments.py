"""
From waveform to a bag of segments
==================================

One synthetic utterance is turned into log-Mel frames, clamped to 2.07 s and
cut into overlapping 32-frame segments. The truth file tells which segments
carry the class chord.
"""

# %%
import numpy as np

from milser.bagging import segment_frames
from milser.dsp import AudioClip
from milser.pipeline import PipelineConfig, utterance_features
from milser.synth import SynthSpec, oracle_segment_labels, synthesize_utterance

spec = SynthSpec(witness_density=0.2)
wave, spans = synthesize_utterance(np.random.default_rng(0), label=2, spec=spec)
print(f"{len(wave)} samples, chord span {spans[0][0]}-{spans[0][1]} ms")

# %%
# Frames: 25 ms Hamming window, 10 ms hop, 64 mel bands
cfg = PipelineConfig()
frames = utterance_features(AudioClip("demo", wave, spec.sample_rate), cfg)
print("log-Mel frames:", frames.shape)

# %%
# Segments shift by 6 frames; 205 frames give 29 of them
segments = segment_frames(frames)
flags = oracle_segment_labels(spans, len(segments))
print("segments:", segments.shape)
print("witness segments:", np.flatnonzero(flags).tolist())

# %%
# The chord lifts band energy inside the span only
energy = segments.mean(axis=(1, 2))
print("mean log energy, witness vs rest: %.2f vs %.2f" % (energy[flags].mean(), energy[~flags].mean()))
