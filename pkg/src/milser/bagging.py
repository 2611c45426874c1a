"""Segmentation of spectrograms into fixed windows and assembly of MIL bags.

Default geometry: 32-frame segments (335 ms at a 10 ms hop with 25 ms windows)
shifted by 6 frames (60 ms). Every segment inherits its utterance's label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import ENERGY_FLOOR, MelSpectrogram
from .errors import EmptyBag, ShapeMismatch, UtteranceTooShort

SEG_FRAMES = 32
SHIFT_FRAMES = 6
LOG_FLOOR = float(np.log(ENERGY_FLOOR))


@dataclass
class Segment:
    utterance_id: str
    start_frame: int
    features: np.ndarray  # (seg_frames, n_mels)
    label: int


@dataclass
class Bag:
    utterance_id: str
    embeddings: np.ndarray  # (T_max, M), zero rows past true_length
    mask: np.ndarray  # (T_max,) bool
    label: int
    true_length: int

    def valid(self) -> np.ndarray:
        return self.embeddings[: self.true_length]


@dataclass
class BagSet:
    """Bags stacked into arrays for batched training and evaluation."""

    ids: list
    X: np.ndarray  # (N, T_max, M)
    mask: np.ndarray  # (N, T_max)
    y: np.ndarray  # (N,)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> BagSet:
        idx = np.asarray(idx)
        return BagSet([self.ids[i] for i in idx], self.X[idx], self.mask[idx], self.y[idx])

    def bags(self):
        for i, uid in enumerate(self.ids):
            n = int(self.mask[i].sum())
            yield Bag(uid, self.X[i], self.mask[i], int(self.y[i]), n)


def _micro(seconds: float) -> int:
    return int(round(seconds * 1e6))


def frames_for_seconds(seconds: float, window_len: float = 0.025, hop: float = 0.010) -> int:
    """Frame count of a signal lasting ``seconds`` (0 if shorter than one window)."""
    total, win, step = _micro(seconds), _micro(window_len), _micro(hop)
    if total < win:
        return 0
    return 1 + (total - win) // step


def num_segments(n_frames: int, seg_frames: int = SEG_FRAMES, shift_frames: int = SHIFT_FRAMES) -> int:
    if n_frames < seg_frames:
        return 0
    return 1 + (n_frames - seg_frames) // shift_frames


def t_max_for(max_seconds: float, seg_frames: int = SEG_FRAMES, shift_frames: int = SHIFT_FRAMES,
              window_len: float = 0.025, hop: float = 0.010) -> int:
    """Bag length implied by a maximum utterance duration (29 at 2.07 s, 71 at 4.55 s)."""
    return num_segments(frames_for_seconds(max_seconds, window_len, hop), seg_frames, shift_frames)


def clamp_utterance(spec: MelSpectrogram, max_seconds: float, pad_value: float = LOG_FLOOR) -> MelSpectrogram:
    """Cut or pad a spectrogram to the frame count of ``max_seconds``.

    Padding rows carry ``pad_value``, the log of the energy floor by default,
    i.e. digital silence in the log domain.
    """
    if max_seconds <= 0:
        raise ValueError("max_seconds must be positive")
    target = frames_for_seconds(max_seconds, spec.window_len, spec.frame_hop)
    frames = spec.frames
    if frames.shape[0] == target:
        return spec
    if frames.shape[0] > target:
        out = frames[:target].copy()
    else:
        out = np.full((target, frames.shape[1]), pad_value, dtype=frames.dtype)
        out[: frames.shape[0]] = frames
    return MelSpectrogram(spec.utterance_id, out, spec.frame_hop, spec.window_len)


def segment_frames(frames: np.ndarray, seg_frames: int = SEG_FRAMES, shift_frames: int = SHIFT_FRAMES,
                   pad_short: bool = True, pad_value: float = LOG_FLOOR) -> np.ndarray:
    """Array form of segmentation: (T, seg_frames, n_mels), a fresh copy."""
    n = frames.shape[0]
    if n < seg_frames:
        if not pad_short:
            raise UtteranceTooShort(f"{n} frames, need at least {seg_frames}")
        padded = np.full((seg_frames, frames.shape[1]), pad_value, dtype=frames.dtype)
        padded[:n] = frames
        frames, n = padded, seg_frames
    count = num_segments(n, seg_frames, shift_frames)
    windows = np.lib.stride_tricks.sliding_window_view(frames, seg_frames, axis=0)
    # sliding_window_view puts the window axis last
    return np.ascontiguousarray(windows[::shift_frames][:count].transpose(0, 2, 1))


def segment_utterance(spec: MelSpectrogram, label: int = -1, seg_frames: int = SEG_FRAMES,
                      shift_frames: int = SHIFT_FRAMES, pad_short: bool = True,
                      pad_value: float = LOG_FLOOR) -> list[Segment]:
    windows = segment_frames(spec.frames, seg_frames, shift_frames, pad_short, pad_value)
    return [
        Segment(spec.utterance_id, t * shift_frames, windows[t], label)
        for t in range(windows.shape[0])
    ]


def assemble_bag(embeddings, label: int, t_max: int, utterance_id: str = "") -> Bag:
    emb = np.asarray(embeddings)
    if emb.size == 0 or len(emb) == 0:
        raise EmptyBag(f"{utterance_id or 'bag'}: no embeddings")
    if emb.ndim != 2:
        raise ShapeMismatch(f"embeddings must be (T, M), got {emb.shape}")
    n = min(len(emb), t_max)
    out = np.zeros((t_max, emb.shape[1]), dtype=emb.dtype)
    out[:n] = emb[:n]
    mask = np.zeros(t_max, dtype=bool)
    mask[:n] = True
    return Bag(utterance_id, out, mask, int(label), n)


def stack_bags(bags: list[Bag]) -> BagSet:
    return BagSet(
        [b.utterance_id for b in bags],
        np.stack([b.embeddings for b in bags]),
        np.stack([b.mask for b in bags]),
        np.array([b.label for b in bags], dtype=np.int64),
    )
