"""Synthetic two-band corpus: per-class spectral templates rendered as
shaped noise plus tones, with frame-level ground-truth labels.

Each utterance is a sequence of class segments joined by raised-cosine
crossfades, so per-utterance mean normalization keeps the contrast between
classes. NB utterances are rendered at 16 kHz, passed through a telephone
channel (band-pass, 300-3400 Hz by default) and then downsampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from . import dsp
from .data import Utterance
from .dsp import AnalysisConfig, Waveform
from .errors import ConfigError


@dataclass(frozen=True)
class ClassTemplate:
    """Spectral bands ``(center_hz, width_hz, gain_db)``; a tone sits at each
    band center below ``tone_max_hz``."""

    bands: Tuple[Tuple[float, float, float], ...]
    tone_max_hz: float = 4000.0


DEFAULT_TEMPLATES = (
    ClassTemplate(((500, 150, 0), (1500, 200, -3))),
    ClassTemplate(((800, 150, 0), (2400, 250, -3))),
    ClassTemplate(((1200, 200, 0), (3000, 250, -3))),
    # same low band as class 2; only the 5.5 kHz band tells them apart
    ClassTemplate(((1200, 200, 0), (3000, 250, -3), (5500, 400, 0))),
    # fricative-like high-band noise
    ClassTemplate(((700, 150, 0), (1800, 200, -3), (6000, 1000, -2))),
)


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 5
    utt_per_class_wb: int = 40
    utt_per_class_nb: int = 80
    utt_seconds: float = 1.0
    seed: int = 0
    templates: Tuple[ClassTemplate, ...] = DEFAULT_TEMPLATES
    segment_ms: Tuple[float, float] = (120.0, 260.0)
    crossfade_ms: float = 10.0
    floor_db: float = -40.0
    jitter: float = 0.03
    gain_jitter_db: float = 2.0
    level_jitter_db: float = 3.0
    noise_db: float = -60.0
    peak: float = 0.5
    # telephone channel applied to NB audio before decimation; None disables
    nb_channel_hz: Optional[Tuple[float, float]] = (300.0, 3400.0)
    nb_channel_order: int = 8
    nb_line_noise_db: Optional[float] = -30.0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if len(self.templates) < self.n_classes:
            raise ConfigError(f"{self.n_classes} classes but only {len(self.templates)} templates")
        for c, tpl in enumerate(self.templates[: self.n_classes]):
            if not tpl.bands or all(g < -120 for _, _, g in tpl.bands):
                raise ConfigError(f"class {c} template carries no energy")
            for fc, width, _ in tpl.bands:
                if not 0 < fc < dsp.WB_RATE / 2 or width <= 0:
                    raise ConfigError(f"class {c}: band ({fc}, {width}) outside 0..8 kHz")
        if not any(fc > 4000 for tpl in self.templates[: self.n_classes] for fc, _, _ in tpl.bands):
            raise ConfigError("at least one class needs energy above 4 kHz")
        lo, hi = self.segment_ms
        if not 0 < lo <= hi:
            raise ConfigError("segment_ms must be an increasing positive range")
        if self.nb_channel_hz is not None:
            lo_hz, hi_hz = self.nb_channel_hz
            if not 0 < lo_hz < hi_hz < dsp.NB_RATE / 2:
                raise ConfigError(f"NB channel band {self.nb_channel_hz} must lie inside 0..4 kHz")
        if self.utt_seconds * 1000 < dsp.AnalysisConfig().frame_len_ms:
            raise ConfigError("utterances must be longer than one analysis frame")


def frame_labels(boundaries: Sequence[int], classes: Sequence[int], n_samples: int, rate: int) -> np.ndarray:
    """Class of the segment covering each analysis-frame centre."""
    cfg = AnalysisConfig.for_rate(rate)
    t = dsp.frame_count(n_samples, cfg)
    centers = (np.arange(t) * cfg.frame_shift + cfg.frame_len / 2) / rate
    seg = np.searchsorted(np.asarray(boundaries) / dsp.WB_RATE, centers, side="right") - 1
    return np.asarray(classes)[np.clip(seg, 0, len(classes) - 1)]


def _envelope(template: ClassTemplate, freqs, rng, cfg: SynthConfig):
    power = np.full_like(freqs, 10 ** (cfg.floor_db / 10))
    centers = []
    for fc, width, gain in template.bands:
        fc = fc * (1 + rng.uniform(-cfg.jitter, cfg.jitter))
        g = 10 ** ((gain + rng.uniform(-cfg.gain_jitter_db, cfg.gain_jitter_db)) / 10)
        power += g * np.exp(-0.5 * ((freqs - fc) / width) ** 2)
        centers.append((fc, g))
    return power, centers


def render_segment(template: ClassTemplate, n: int, rng, cfg: SynthConfig) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, 1 / dsp.WB_RATE)
    power, centers = _envelope(template, freqs, rng, cfg)
    # unit-variance white noise: every band keeps its absolute level, so the
    # low band carries no trace of the high-band content
    spec = np.fft.rfft(rng.standard_normal(n)) * np.sqrt(power * 2 * len(freqs) / n)
    x = np.fft.irfft(spec, n)
    t = np.arange(n) / dsp.WB_RATE
    for fc, g in centers:
        if fc < template.tone_max_hz:
            x += 0.5 * np.sqrt(g) * np.sin(2 * np.pi * fc * t + rng.uniform(0, 2 * np.pi))
    return x * 10 ** (rng.uniform(-cfg.level_jitter_db, cfg.level_jitter_db) / 20)


def render_utterance(classes: Sequence[int], durations: Sequence[int], rng, cfg: SynthConfig) -> np.ndarray:
    n = int(sum(durations))
    fade = max(1, int(cfg.crossfade_ms * dsp.WB_RATE / 1000))
    bounds = np.concatenate([[0], np.cumsum(durations)])
    out = np.zeros(n)
    ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(fade) + 0.5) / fade)
    for i, c in enumerate(classes):
        a, b = bounds[i], bounds[i + 1]
        lo, hi = max(0, a - fade // 2), min(n, b + fade - fade // 2)
        gate = np.ones(hi - lo)
        if i > 0:
            gate[:fade] = ramp
        if i < len(classes) - 1:
            gate[-fade:] = ramp[::-1]
        out[lo:hi] += gate * render_segment(cfg.templates[c], hi - lo, rng, cfg)
    out += rng.standard_normal(n) * 10 ** (cfg.noise_db / 20)
    return np.clip(out * cfg.peak / (np.max(np.abs(out)) + 1e-12), -1.0, 1.0)


def nb_channel(x: np.ndarray, cfg: SynthConfig, rng=None) -> np.ndarray:
    """Line noise plus a Butterworth band-pass standing in for a telephone
    line (16 kHz input)."""
    if cfg.nb_line_noise_db is not None:
        x = x + rng.standard_normal(len(x)) * 10 ** (cfg.nb_line_noise_db / 20)
    if cfg.nb_channel_hz is None:
        return x
    sos = signal.butter(cfg.nb_channel_order, cfg.nb_channel_hz, btype="bandpass", fs=dsp.WB_RATE, output="sos")
    return signal.sosfilt(sos, x)


def _segment_plan(rng, cfg: SynthConfig):
    """Segment classes are i.i.d. apart from never repeating back to back, so
    neighbouring segments say nothing about the current class."""
    n = int(round(cfg.utt_seconds * dsp.WB_RATE))
    lo, hi = (int(ms * dsp.WB_RATE / 1000) for ms in cfg.segment_ms)
    durations, classes = [], []
    remaining = n
    while remaining > 0:
        d = int(rng.integers(lo, hi + 1))
        if remaining - d < lo:
            d = remaining
        c = int(rng.integers(cfg.n_classes))
        if classes and c == classes[-1]:
            c = (c + 1 + int(rng.integers(cfg.n_classes - 1))) % cfg.n_classes
        durations.append(d)
        classes.append(c)
        remaining -= d
    return classes, durations


def synth_utterances(cfg: SynthConfig, n_utts: int, bandwidth: str, prefix: str, seed_offset: int = 0) -> List[Utterance]:
    """Render ``n_utts`` utterances; ``bandwidth`` is ``"wb"`` or ``"nb"``."""
    rng = np.random.default_rng([cfg.seed, seed_offset, 0 if bandwidth == "wb" else 1])
    out = []
    for i in range(n_utts):
        classes, durations = _segment_plan(rng, cfg)
        x = render_utterance(classes, durations, rng, cfg)
        bounds = np.concatenate([[0], np.cumsum(durations)[:-1]])
        uid = f"{prefix}{i:04d}"
        if bandwidth == "wb":
            wave = Waveform(x, dsp.WB_RATE, uid)
        else:
            x = nb_channel(x, cfg, rng)
            wave = Waveform(dsp.downsample_2x(Waveform(x, dsp.WB_RATE)).samples, dsp.NB_RATE, uid)
        out.append(Utterance(wave, frame_labels(bounds, classes, len(wave.samples), wave.sample_rate)))
    return out


def synth_corpus(cfg: SynthConfig = SynthConfig()):
    """``(wb_corpus, nb_corpus, labels)`` where labels maps utterance id to frame labels."""
    wb = synth_utterances(cfg, cfg.utt_per_class_wb * cfg.n_classes, "wb", "wb", 0)
    nb = synth_utterances(cfg, cfg.utt_per_class_nb * cfg.n_classes, "nb", "nb", 1)
    labels: Dict[str, np.ndarray] = {u.utterance_id: u.labels for u in wb + nb}
    return wb, nb, labels


def synth_test_sets(cfg: SynthConfig, n_utts: int = 10) -> Dict[str, List[Utterance]]:
    """Two WB and two NB held-out sets; the second of each has a -35 dB
    background-noise floor. NB line noise is added on top in both NB sets."""
    sets = {}
    for j, (name, bw, noise) in enumerate(
        [("WS1", "wb", cfg.noise_db), ("WS2", "wb", -35.0), ("NS1", "nb", cfg.noise_db), ("NS2", "nb", -35.0)]
    ):
        sub = SynthConfig(**{**cfg.__dict__, "noise_db": noise})
        sets[name] = synth_utterances(sub, n_utts, bw, name.lower() + "_", 100 + j)
    return sets
