"""Waveform to log-Mel conversion.

Analysis geometry defaults to 25 ms Hamming windows every 10 ms, a 512-point
FFT and 64 HTK-scale Mel bands. Everything here runs in float64 and is a
pure function of its inputs.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClipTooShort, InvalidRange, InvalidRate, ShapeMismatch, UnsupportedAudio

ENERGY_FLOOR = 1e-10


@dataclass
class AudioClip:
    id: str
    samples: np.ndarray
    sample_rate: int
    label: int = -1
    speaker: str = ""
    session: str = ""
    fold: int = -1

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"{self.id}: expected mono samples, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError(f"{self.id}: empty waveform")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"{self.id}: non-finite samples")
        if np.max(np.abs(self.samples)) > 1.0:
            raise ValueError(f"{self.id}: samples must lie in [-1, 1]")
        if int(self.sample_rate) <= 0:
            raise InvalidRate(f"{self.id}: sample rate must be positive")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelFilterBank:
    weights: np.ndarray  # (nfft // 2 + 1, n_mels)
    fmin: float
    fmax: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[1]


@dataclass
class MelSpectrogram:
    utterance_id: str
    frames: np.ndarray  # (F, n_mels)
    frame_hop: float = 0.010
    window_len: float = 0.025

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class DspConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    nfft: int = 512
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None
    energy_floor: float = ENERGY_FLOOR
    window: str = "hamming"
    normalize: bool = False
    _bank: MelFilterBank | None = field(default=None, init=False, repr=False, compare=False)

    def filterbank(self) -> MelFilterBank:
        if self._bank is None:
            self._bank = build_mel_filterbank(
                self.sample_rate, self.nfft, self.n_mels, self.fmin, self.fmax
            )
        return self._bank


def hz_to_mel(f):
    """HTK mel scale."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_geometry(sample_rate: int, window_ms: float, hop_ms: float) -> tuple[int, int]:
    """Return (window_samples, hop_samples) for a rate and millisecond geometry."""
    win = int(round(sample_rate * window_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if win <= 0 or hop <= 0:
        raise InvalidRate(f"sample rate {sample_rate} too low for {window_ms}/{hop_ms} ms framing")
    return win, hop


def num_frames(n_samples: int, window_samples: int, hop_samples: int) -> int:
    if n_samples < window_samples:
        return 0
    return 1 + (n_samples - window_samples) // hop_samples


def _window(name: str, n: int) -> np.ndarray:
    if name == "hamming":
        return np.hamming(n)
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(n)
    if name == "hann":
        return np.hanning(n)
    raise ValueError(f"unknown window {name!r}")


def stft_power(
    clip: AudioClip,
    window_ms: float = 25.0,
    hop_ms: float = 10.0,
    nfft: int = 512,
    window: str = "hamming",
    expected_rate: int | None = None,
) -> np.ndarray:
    """Squared-magnitude STFT, shape (F, nfft // 2 + 1).

    Each frame is windowed, zero-padded to ``nfft`` and transformed; only the
    non-negative frequency bins are kept.
    """
    if expected_rate is not None and clip.sample_rate != expected_rate:
        raise InvalidRate(
            f"{clip.id}: sample rate {clip.sample_rate} Hz, configured {expected_rate} Hz"
        )
    win, hop = frame_geometry(clip.sample_rate, window_ms, hop_ms)
    if nfft < win:
        raise ValueError(f"nfft {nfft} shorter than window of {win} samples")
    n = clip.samples.size
    if n < win:
        raise ClipTooShort(f"{clip.id}: {n} samples, need at least {win}")
    n_frames = num_frames(n, win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, win)[::hop][:n_frames]
    spectrum = np.fft.rfft(frames * _window(window, win), n=nfft, axis=1)
    return spectrum.real**2 + spectrum.imag**2


def build_mel_filterbank(
    sample_rate: int,
    nfft: int,
    n_mels: int = 64,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> MelFilterBank:
    """Triangular filters with peaks equally spaced on the HTK mel scale."""
    nyquist = sample_rate / 2.0
    if fmax is None:
        fmax = nyquist
    if n_mels < 1:
        raise InvalidRange("n_mels must be at least 1")
    if not (0.0 <= fmin < fmax <= nyquist):
        raise InvalidRange(f"need 0 <= fmin < fmax <= {nyquist}, got fmin={fmin}, fmax={fmax}")

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(nfft // 2 + 1) * sample_rate / nfft
    lower, centre, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (bin_hz[:, None] - lower) / (centre - lower)
    falling = (upper - bin_hz[:, None]) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.max(axis=0) <= 0.0)
    if empty.size:
        raise InvalidRange(
            f"{empty.size} mel filters contain no FFT bin; reduce n_mels or raise nfft"
        )
    return MelFilterBank(weights=weights, fmin=float(fmin), fmax=float(fmax))


def log_mel(
    power: np.ndarray,
    bank: MelFilterBank,
    energy_floor: float = ENERGY_FLOOR,
    utterance_id: str = "",
    hop: float = 0.010,
    window_len: float = 0.025,
) -> MelSpectrogram:
    power = np.asarray(power, dtype=np.float64)
    if power.ndim != 2 or power.shape[1] != bank.weights.shape[0]:
        raise ShapeMismatch(
            f"power has shape {power.shape}, filterbank expects {bank.weights.shape[0]} bins"
        )
    energies = power @ bank.weights
    frames = np.log(np.maximum(energies, energy_floor))
    return MelSpectrogram(utterance_id, frames, frame_hop=hop, window_len=window_len)


def normalize_utterance(spec: MelSpectrogram, eps: float = 1e-8) -> MelSpectrogram:
    """Zero-mean, unit-variance per Mel bin over one utterance."""
    x = spec.frames
    out = (x - x.mean(axis=0)) / (x.std(axis=0) + eps)
    return MelSpectrogram(spec.utterance_id, out, spec.frame_hop, spec.window_len)


def featurize(clip: AudioClip, cfg: DspConfig | None = None) -> MelSpectrogram:
    """Full front end: rate check, power STFT, Mel projection, log."""
    cfg = cfg or DspConfig()
    power = stft_power(
        clip, cfg.window_ms, cfg.hop_ms, cfg.nfft, cfg.window, expected_rate=cfg.sample_rate
    )
    spec = log_mel(
        power,
        cfg.filterbank(),
        cfg.energy_floor,
        utterance_id=clip.id,
        hop=cfg.hop_ms / 1000.0,
        window_len=cfg.window_ms / 1000.0,
    )
    return normalize_utterance(spec) if cfg.normalize else spec


def read_wav(path, **meta) -> AudioClip:
    """Load a 16-bit PCM mono RIFF/WAVE file. Multi-channel input is rejected."""
    path = Path(path)
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise UnsupportedAudio(f"{path}: {wf.getnchannels()} channels, only mono is supported")
        if wf.getsampwidth() != 2:
            raise UnsupportedAudio(f"{path}: sample width {wf.getsampwidth()} bytes, need 16-bit PCM")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    meta.setdefault("id", path.stem)
    return AudioClip(samples=pcm, sample_rate=rate, **meta)


def write_wav(path, samples, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as 16-bit PCM mono."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())
