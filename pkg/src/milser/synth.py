"""Synthetic weak-label corpus with known witness segments.

Each utterance is band-limited Gaussian noise. A class-specific two-tone
chord (class k: 600 + 400k Hz and 1000 + 400k Hz) is mixed in over one
contiguous span, sized so that a ``witness_density`` fraction of the
utterance's segments are witnesses. Only the utterance carries a label, and
the span list is written to a truth file so MIL behaviour can be checked
against ground truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bagging import SEG_FRAMES, SHIFT_FRAMES, frames_for_seconds, num_segments
from .dsp import write_wav
from .store import Manifest, ManifestRecord, write_manifest

HOP_MS = 10
WINDOW_MS = 25
NOISE_BAND = (100.0, 7000.0)
NOISE_RMS = 0.05
RAMP_MS = 5.0


@dataclass
class SynthSpec:
    n_classes: int = 4
    n_utterances: int = 600
    utterance_seconds: float = 2.07
    sample_rate: int = 16000
    witness_density: float = 0.2
    snr_db: float = 0.0
    seed: int = 0
    n_folds: int = 10
    n_sessions: int = 5

    def __post_init__(self):
        if not 0.0 < self.witness_density <= 1.0:
            raise ValueError("witness_density must lie in (0, 1]")
        if self.n_utterances < self.n_classes:
            raise ValueError("need at least one utterance per class")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        top = 1000.0 + 400.0 * (self.n_classes - 1)
        if top >= self.sample_rate / 2:
            raise ValueError(f"{self.n_classes} classes put chord tones above Nyquist")

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthTruth:
    """Per utterance: class label and witness spans as (start_ms, end_ms) pairs."""

    labels: dict
    spans: dict

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for uid, label in self.labels.items():
                spans = ";".join(f"{s}-{e}" for s, e in self.spans[uid])
                fh.write(f"{uid}\t{label}\t{spans}\n")

    @classmethod
    def read(cls, path) -> SynthTruth:
        labels, spans = {}, {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                uid, label, text = line.split("\t")
                labels[uid] = int(label)
                spans[uid] = [tuple(int(v) for v in item.split("-")) for item in text.split(";") if item]
        return cls(labels, spans)


def chord_frequencies(k: int) -> tuple[float, float]:
    return 600.0 + 400.0 * k, 1000.0 + 400.0 * k


def frame_span_ms(first: int, stop: int) -> tuple[int, int]:
    """Time extent of frames [first, stop): start of the first to end of the last."""
    return HOP_MS * first, HOP_MS * (stop - 1) + WINDOW_MS


def witness_frames(t_first: int, n_witness: int, n_frames: int, seg_frames=SEG_FRAMES,
                   shift=SHIFT_FRAMES) -> tuple[int, int]:
    """Frame span [a, b) that makes segments t_first .. t_first + n_witness - 1 witnesses.

    A segment is a witness when at least half its frames are inside the span,
    i.e. t is flagged iff (a - half) / shift <= t <= (b - half) / shift. Offsetting
    both ends by ``shift - 1`` frames from the flagging thresholds pins the
    flagged run exactly. Needs n_witness >= 2 so the span is at least ``half``
    frames long.
    """
    half = seg_frames // 2
    t_last = t_first + n_witness - 1
    a = shift * t_first + half - (shift - 1)
    b = shift * t_last + half + (shift - 1)
    return max(0, a), min(n_frames, b)


def oracle_segment_labels(spans_ms, n_segments: int, seg_frames=SEG_FRAMES, shift=SHIFT_FRAMES,
                          hop_ms=HOP_MS, window_ms=WINDOW_MS) -> np.ndarray:
    """Boolean witness flag per segment: at least half its frames lie inside a span.

    A frame is inside a span when its whole analysis window is.
    """
    n_frames = shift * (n_segments - 1) + seg_frames
    starts = np.arange(n_frames) * hop_ms
    inside = np.zeros(n_frames, dtype=bool)
    for s, e in spans_ms:
        inside |= (starts >= s) & (starts + window_ms <= e)
    counts = np.array([inside[t * shift: t * shift + seg_frames].sum() for t in range(n_segments)])
    return 2 * counts >= seg_frames


def _band_noise(rng, n, sample_rate):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < NOISE_BAND[0]) | (freqs > NOISE_BAND[1])] = 0.0
    noise = np.fft.irfft(spec, n)
    return noise * (NOISE_RMS / np.sqrt(np.mean(noise**2)))


def synthesize_utterance(rng, label: int, spec: SynthSpec):
    """Return (waveform, spans_ms) for one utterance of class ``label``."""
    sr = spec.sample_rate
    n = int(round(spec.utterance_seconds * sr))
    n_frames = frames_for_seconds(spec.utterance_seconds, WINDOW_MS / 1000, HOP_MS / 1000)
    T = num_segments(n_frames)
    n_witness = min(T, max(2, int(round(spec.witness_density * T))))
    t_first = int(rng.integers(0, T - n_witness + 1))
    a, b = witness_frames(t_first, n_witness, n_frames)
    if n_witness == T:
        a, b = 0, n_frames
    start_ms, end_ms = frame_span_ms(a, b)

    x = _band_noise(rng, n, sr)
    i0, i1 = start_ms * sr // 1000, min(n, end_ms * sr // 1000)
    t = np.arange(i1 - i0) / sr
    amp = NOISE_RMS * 10.0 ** (spec.snr_db / 20.0)  # chord power amp^2 vs noise power
    tone = sum(amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in chord_frequencies(label))
    ramp = min(len(t) // 2, int(RAMP_MS * sr / 1000))
    if ramp:
        env = np.ones(len(t))
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp], env[-ramp:] = fade, fade[::-1]
        tone = tone * env
    x[i0:i1] += tone
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return x, [(start_ms, end_ms)]


def generate_corpus(spec: SynthSpec, out_dir, write_audio=True):
    """Write WAVs, ``manifest.tsv`` and ``truth.tsv`` under ``out_dir``.

    Labels cycle through the classes and folds/sessions are assigned per class
    round, so folds are class-balanced whenever ``n_utterances`` divides
    evenly. Returns (manifest, truth, waveforms dict).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = [f"class{k}" for k in range(spec.n_classes)]
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_utterances)
    records, labels, spans, waves = [], {}, {}, {}
    for i in range(spec.n_utterances):
        label = i % spec.n_classes
        rnd = i // spec.n_classes
        uid = f"utt{i:05d}"
        x, sp = synthesize_utterance(np.random.default_rng(seeds[i]), label, spec)
        if write_audio:
            write_wav(out / f"{uid}.wav", x, spec.sample_rate)
        records.append(ManifestRecord(
            f"{uid}.wav", uid, classes[label], label,
            speaker=f"spk{rnd % (2 * spec.n_sessions)}",
            session=f"s{rnd % spec.n_sessions}",
            fold=rnd % spec.n_folds,
            duration_seconds=len(x) / spec.sample_rate,
        ))
        labels[uid], spans[uid], waves[uid] = label, sp, x
    manifest = Manifest(classes, records)
    truth = SynthTruth(labels, spans)
    write_manifest(manifest, out / "manifest.tsv")
    truth.write(out / "truth.tsv")
    return manifest, truth, waves
