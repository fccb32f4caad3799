"""Waveform-to-feature frontend for 8 kHz and 16 kHz speech.

Pipeline: optional 2x resampling, 40-band logmel, global then per-utterance
mean normalization, delta / double-delta maps and 11-frame context stacking.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import signal

from .errors import EmptyCorpusError, RateMismatchError, ShapeError, TooShortError

WB_RATE = 16000
NB_RATE = 8000
SUPPORTED_RATES = (NB_RATE, WB_RATE)

N_MELS = 40
CONTEXT = 11
DELTA_WINDOW = 2
LOG_FLOOR = 1e-10
STDDEV_FLOOR = 1e-5

# Resampling lowpass, designed at 16 kHz: cutoff 3.8 kHz, 500 Hz transition,
# >= 65 dB stopband so images/aliases near 4.05 kHz and up are suppressed.
RESAMPLE_CUTOFF_HZ = 3800.0
RESAMPLE_TRANSITION_HZ = 500.0
RESAMPLE_STOPBAND_DB = 65.0


class Bandwidth(str, enum.Enum):
    WB = "WB"
    NB_UPSAMPLED = "NB_upsampled"
    NB_NATIVE = "NB_native"
    WB_DOWNSAMPLED = "WB_downsampled"
    BWE_MAPPED = "BWE_mapped"

    def __str__(self):
        return self.value


#: Tags whose features live in the 16 kHz / 0-8 kHz mel domain.
WB_DOMAIN_TAGS = frozenset({Bandwidth.WB, Bandwidth.NB_UPSAMPLED, Bandwidth.BWE_MAPPED})
NB_DOMAIN_TAGS = frozenset({Bandwidth.NB_NATIVE, Bandwidth.WB_DOWNSAMPLED})


def domain_of(tag: Bandwidth) -> str:
    return "wb" if Bandwidth(tag) in WB_DOMAIN_TAGS else "nb"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    utterance_id: str = ""
    bandwidth: Optional[Bandwidth] = None

    def __post_init__(self):
        if self.sample_rate not in SUPPORTED_RATES:
            raise RateMismatchError(
                f"sample rate {self.sample_rate} not in {SUPPORTED_RATES}"
            )
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeError("waveform samples must be one-dimensional (mono)")
        if self.bandwidth is None:
            self.bandwidth = Bandwidth.WB if self.sample_rate == WB_RATE else Bandwidth.NB_NATIVE
        else:
            self.bandwidth = Bandwidth(self.bandwidth)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AnalysisConfig:
    sample_rate: int = WB_RATE
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_mels: int = N_MELS
    fft_size: int = 512
    log_floor: float = LOG_FLOOR
    mel_low_hz: float = 0.0
    mel_high_hz: float = 8000.0

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.mel_high_hz > self.sample_rate / 2:
            raise ValueError("mel_high_hz exceeds the Nyquist frequency")
        if not 0 <= self.mel_low_hz < self.mel_high_hz:
            raise ValueError("need 0 <= mel_low_hz < mel_high_hz")
        if self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.fft_size < self.frame_len:
            raise ValueError("fft_size shorter than the analysis frame")

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_len_ms * self.sample_rate / 1000))

    @property
    def frame_shift(self) -> int:
        return int(round(self.frame_shift_ms * self.sample_rate / 1000))

    @classmethod
    def for_rate(cls, sample_rate: int, **overrides) -> "AnalysisConfig":
        """Defaults for a sample rate: the mel bank always spans 0..Nyquist."""
        if sample_rate not in SUPPORTED_RATES:
            raise RateMismatchError(f"unsupported sample rate {sample_rate}")
        frame_len = int(round(overrides.get("frame_len_ms", 25.0) * sample_rate / 1000))
        fft_size = 1 << max(0, int(np.ceil(np.log2(frame_len))))
        kw = dict(sample_rate=sample_rate, fft_size=fft_size, mel_high_hz=sample_rate / 2)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class FeatureSequence:
    """Per-utterance features, stored as a ``T x (n_maps * dim)`` matrix."""

    frames: np.ndarray
    n_maps: int = 1
    bandwidth_tag: Bandwidth = Bandwidth.WB
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim == 3:
            self.frames = self.frames.reshape(self.frames.shape[0], -1)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeError(f"features must be a non-empty T x D matrix, got {self.frames.shape}")
        if self.n_maps not in (1, 3) or self.frames.shape[1] % self.n_maps:
            raise ShapeError(f"bad map count {self.n_maps} for width {self.frames.shape[1]}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"non-finite feature values in {self.utterance_id!r}")
        self.bandwidth_tag = Bandwidth(self.bandwidth_tag)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        """Dimension of one map."""
        return self.frames.shape[1] // self.n_maps

    @property
    def maps(self) -> np.ndarray:
        """View of the frames as ``T x n_maps x dim``."""
        return self.frames.reshape(self.n_frames, self.n_maps, self.dim)

    @property
    def static(self) -> np.ndarray:
        return self.maps[:, 0, :]


@dataclass
class GlobalStats:
    mean: np.ndarray
    stddev: np.ndarray
    n_frames_accumulated: int


@dataclass
class ContextWindow:
    tensor: np.ndarray
    center_frame_index: int
    label: Optional[int] = None


# --------------------------------------------------------------------------
# resampling


@lru_cache(maxsize=None)
def resampling_filter() -> np.ndarray:
    """Kaiser-windowed sinc lowpass shared by both 2x resamplers (unit DC gain)."""
    numtaps, beta = signal.kaiserord(RESAMPLE_STOPBAND_DB, RESAMPLE_TRANSITION_HZ / (WB_RATE / 2))
    numtaps |= 1
    taps = signal.firwin(numtaps, RESAMPLE_CUTOFF_HZ, window=("kaiser", beta), fs=WB_RATE)
    taps.setflags(write=False)
    return taps


def _filter_centered(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # zero-phase alignment: drop the (numtaps - 1) / 2 sample group delay
    delay = (len(taps) - 1) // 2
    return np.convolve(x, taps)[delay : delay + len(x)]


def upsample_2x(w: Waveform) -> Waveform:
    """8 kHz -> 16 kHz by zero insertion and windowed-sinc interpolation."""
    if w.sample_rate != NB_RATE:
        raise RateMismatchError(f"upsample_2x expects 8000 Hz input, got {w.sample_rate}")
    stuffed = np.zeros(2 * len(w.samples))
    stuffed[::2] = w.samples
    out = _filter_centered(stuffed, 2.0 * resampling_filter())
    return Waveform(out, WB_RATE, w.utterance_id, Bandwidth.NB_UPSAMPLED)


def downsample_2x(w: Waveform) -> Waveform:
    """16 kHz -> 8 kHz: anti-alias lowpass, then keep every other sample."""
    if w.sample_rate != WB_RATE:
        raise RateMismatchError(f"downsample_2x expects 16000 Hz input, got {w.sample_rate}")
    out = _filter_centered(w.samples, resampling_filter())[::2]
    return Waveform(out, NB_RATE, w.utterance_id, Bandwidth.WB_DOWNSAMPLED)


# --------------------------------------------------------------------------
# logmel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: AnalysisConfig) -> np.ndarray:
    edges = np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.n_mels + 2)
    return mel_to_hz(edges[1:-1])


@lru_cache(maxsize=16)
def _mel_filterbank(sample_rate, fft_size, n_mels, low, high) -> np.ndarray:
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(low), hz_to_mel(high), n_mels + 2))
    bin_hz = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (bin_hz - lo) / (mid - lo)
    falling = (hi - bin_hz) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def mel_filterbank(cfg: AnalysisConfig) -> np.ndarray:
    """Triangular filters, ``n_mels x (fft_size // 2 + 1)``, equally spaced in mel."""
    return _mel_filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.mel_low_hz, cfg.mel_high_hz)


def frame_count(n_samples: int, cfg: AnalysisConfig) -> int:
    if n_samples < cfg.frame_len:
        return 0
    return (n_samples - cfg.frame_len) // cfg.frame_shift + 1


def power_spectrogram(w: Waveform, cfg: AnalysisConfig) -> np.ndarray:
    n = frame_count(len(w.samples), cfg)
    if n < 1:
        raise TooShortError(
            f"utterance {w.utterance_id!r}: {len(w.samples)} samples < one frame ({cfg.frame_len})"
        )
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, cfg.frame_len)[:: cfg.frame_shift][:n]
    spec = np.fft.rfft(frames * np.hamming(cfg.frame_len), n=cfg.fft_size, axis=1)
    return spec.real**2 + spec.imag**2


def logmel(w: Waveform, cfg: Optional[AnalysisConfig] = None) -> FeatureSequence:
    if cfg is None:
        cfg = AnalysisConfig.for_rate(w.sample_rate)
    if cfg.sample_rate != w.sample_rate:
        raise RateMismatchError(
            f"analysis config is for {cfg.sample_rate} Hz, waveform is {w.sample_rate} Hz"
        )
    energies = power_spectrogram(w, cfg) @ mel_filterbank(cfg).T
    feats = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureSequence(feats, 1, w.bandwidth, w.utterance_id)


# --------------------------------------------------------------------------
# normalization


def compute_global_stats(corpus: Iterable[FeatureSequence], stddev_floor: float = STDDEV_FLOOR) -> GlobalStats:
    """Corpus-wide per-dimension mean and population stddev (pairwise merge of moments)."""
    count = 0
    mean = m2 = None
    for seq in corpus:
        x = np.asarray(seq.static if isinstance(seq, FeatureSequence) else seq, dtype=np.float64)
        n_b = x.shape[0]
        mean_b = x.mean(axis=0)
        m2_b = ((x - mean_b) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        if mean_b.shape != mean.shape:
            raise ShapeError(f"dimension mismatch in corpus: {mean_b.shape} vs {mean.shape}")
        total = count + n_b
        diff = mean_b - mean
        mean = mean + diff * (n_b / total)
        m2 = m2 + m2_b + diff**2 * (count * n_b / total)
        count = total
    if mean is None:
        raise EmptyCorpusError("cannot compute statistics of an empty corpus")
    stddev = np.maximum(np.sqrt(m2 / count), stddev_floor)
    return GlobalStats(mean, stddev, count)


def apply_cmn(f: FeatureSequence, g: GlobalStats) -> FeatureSequence:
    """Global mean subtraction followed by per-utterance mean subtraction."""
    if f.n_maps != 1:
        raise ShapeError("CMN operates on static (single-map) features")
    if f.dim != len(g.mean):
        raise ShapeError(f"feature dim {f.dim} does not match stats dim {len(g.mean)}")
    out = f.frames.astype(np.float64) - g.mean
    out -= out.mean(axis=0)
    return replace(f, frames=out)


# --------------------------------------------------------------------------
# deltas and context


def _delta(c: np.ndarray, width: int = DELTA_WINDOW) -> np.ndarray:
    t = c.shape[0]
    padded = np.pad(c, ((width, width), (0, 0)), mode="edge")
    norm = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(c, dtype=np.float64)
    for n in range(1, width + 1):
        out += n * (padded[width + n : width + n + t] - padded[width - n : width - n + t])
    return out / norm


def compute_deltas(f: FeatureSequence) -> FeatureSequence:
    if f.n_maps != 1:
        raise ShapeError("deltas are computed from static features only")
    static = f.frames.astype(np.float64)
    d1 = _delta(static)
    d2 = _delta(d1)
    return replace(f, frames=np.stack([static, d1, d2], axis=1).reshape(f.n_frames, -1), n_maps=3)


@lru_cache(maxsize=512)
def delta_matrix(n_frames: int, width: int = DELTA_WINDOW) -> np.ndarray:
    """The delta regression as a ``T x T`` linear operator (edge replication included)."""
    a = np.zeros((n_frames, n_frames))
    norm = 2.0 * sum(n * n for n in range(1, width + 1))
    rows = np.arange(n_frames)
    for n in range(1, width + 1):
        np.add.at(a, (rows, np.clip(rows + n, 0, n_frames - 1)), n / norm)
        np.add.at(a, (rows, np.clip(rows - n, 0, n_frames - 1)), -n / norm)
    a.setflags(write=False)
    return a


def context_indices(n_frames: int, context: int = CONTEXT) -> np.ndarray:
    """``T x context`` frame indices, replicated at the utterance edges."""
    half = context // 2
    idx = np.arange(n_frames)[:, None] + np.arange(-half, half + 1)[None, :]
    return np.clip(idx, 0, n_frames - 1)


def context_tensor(f: FeatureSequence, context: int = CONTEXT) -> np.ndarray:
    """All windows of an utterance as one ``T x maps x context x dim`` array."""
    if f.n_maps != 3:
        raise ShapeError(f"context stacking needs 3 maps, got {f.n_maps}")
    return f.maps[context_indices(f.n_frames, context)].transpose(0, 2, 1, 3)


def stack_context(f: FeatureSequence, labels: Optional[Sequence[int]] = None) -> list:
    tensors = context_tensor(f)
    if labels is not None and len(labels) != len(tensors):
        raise ShapeError(f"{len(labels)} labels for {len(tensors)} frames")
    return [
        ContextWindow(tensors[t], t, None if labels is None else int(labels[t]))
        for t in range(len(tensors))
    ]


def featurize(
    w: Waveform,
    stats: Optional[GlobalStats] = None,
    cfg: Optional[AnalysisConfig] = None,
) -> FeatureSequence:
    """logmel -> CMN -> deltas. Without ``stats`` only the utterance CMN applies."""
    f = logmel(w, cfg)
    if stats is None:
        stats = GlobalStats(np.zeros(f.dim), np.ones(f.dim), 0)
    return compute_deltas(apply_cmn(f, stats))
