"""Labeled corpora and window datasets.

A :class:`Dataset` keeps the 3-map frames of every utterance in one array and
gathers 11-frame context windows on demand, so a corpus of ``N`` frames costs
``N x 120`` floats instead of ``N x 1320``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dsp
from .dsp import Bandwidth, FeatureSequence, GlobalStats, Waveform
from .errors import EmptyCorpusError, LabelError, ShapeError, TagError


@dataclass
class Utterance:
    """A waveform with one class label per analysis frame."""

    wave: Waveform
    labels: np.ndarray

    @property
    def utterance_id(self) -> str:
        return self.wave.utterance_id


def to_wb(wave: Waveform) -> Waveform:
    return wave if wave.sample_rate == dsp.WB_RATE else dsp.upsample_2x(wave)


def to_nb(wave: Waveform) -> Waveform:
    return wave if wave.sample_rate == dsp.NB_RATE else dsp.downsample_2x(wave)


def convert(utts: Sequence[Utterance], domain: str) -> List[Utterance]:
    """Bring every utterance to the ``"wb"`` (16 kHz) or ``"nb"`` (8 kHz) rate."""
    fn = {"wb": to_wb, "nb": to_nb}[domain]
    return [Utterance(fn(u.wave), u.labels) for u in utts]


def featurize_corpus(
    utts: Sequence[Utterance], stats: Optional[GlobalStats] = None
) -> tuple:
    """logmel -> global + utterance CMN -> deltas for every utterance.

    Global statistics are estimated from this corpus unless given.
    Returns ``(features, stats)``.
    """
    if not utts:
        raise EmptyCorpusError("no utterances to featurize")
    rates = {u.wave.sample_rate for u in utts}
    if len(rates) != 1:
        raise TagError(f"mixed sample rates in one featurization call: {sorted(rates)}")
    statics = [dsp.logmel(u.wave) for u in utts]
    for u, f in zip(utts, statics):
        if len(u.labels) != f.n_frames:
            raise ShapeError(f"{u.utterance_id}: {len(u.labels)} labels for {f.n_frames} frames")
    if stats is None:
        stats = dsp.compute_global_stats(statics)
    feats = [dsp.compute_deltas(dsp.apply_cmn(f, stats)) for f in statics]
    return feats, stats


@dataclass
class Dataset:
    frames: np.ndarray  # (n_frames, 3, dim), utterances end to end
    labels: np.ndarray  # (n_frames,)
    lengths: List[int]
    utt_ids: List[str]
    utt_tags: List[Bandwidth]
    domain: str
    seed: int = 0
    n_classes: Optional[int] = None
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.utt_tags = [Bandwidth(t) for t in self.utt_tags]
        if self.frames.ndim != 3 or self.frames.shape[1] != 3:
            raise ShapeError(f"dataset frames must be N x 3 x D, got {self.frames.shape}")
        if sum(self.lengths) != len(self.frames) or len(self.labels) != len(self.frames):
            raise ShapeError("utterance lengths, frames and labels disagree")
        if not (len(self.lengths) == len(self.utt_ids) == len(self.utt_tags)):
            raise ShapeError("per-utterance metadata lengths disagree")
        for tag in self.utt_tags:
            if dsp.domain_of(tag) != self.domain:
                raise TagError(f"{tag} features cannot live in a {self.domain}-domain dataset")
        if self.n_classes is not None and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise LabelError(f"labels outside [0, {self.n_classes})")
        offsets = np.concatenate([[0], np.cumsum(self.lengths)]).astype(np.int64)
        self.offsets = offsets
        self._ctx = np.concatenate(
            [o + dsp.context_indices(t) for o, t in zip(offsets[:-1], self.lengths)]
        ) if self.lengths else np.zeros((0, dsp.CONTEXT), dtype=np.int64)

    @classmethod
    def from_features(
        cls,
        feats: Sequence[FeatureSequence],
        labels: Sequence[np.ndarray],
        domain: str,
        seed: int = 0,
        n_classes: Optional[int] = None,
    ) -> "Dataset":
        if not feats:
            raise EmptyCorpusError("no features")
        for f, lab in zip(feats, labels):
            if f.n_maps != 3:
                raise ShapeError(f"{f.utterance_id}: dataset features need 3 maps")
            if len(lab) != f.n_frames:
                raise ShapeError(f"{f.utterance_id}: {len(lab)} labels for {f.n_frames} frames")
        return cls(
            frames=np.concatenate([f.maps for f in feats]),
            labels=np.concatenate([np.asarray(lab) for lab in labels]),
            lengths=[f.n_frames for f in feats],
            utt_ids=[f.utterance_id for f in feats],
            utt_tags=[f.bandwidth_tag for f in feats],
            domain=domain,
            seed=seed,
            n_classes=n_classes,
        )

    @staticmethod
    def concat(parts: Sequence["Dataset"], seed: int = 0) -> "Dataset":
        domains = {p.domain for p in parts}
        if len(domains) != 1:
            raise TagError(f"cannot mix feature domains {sorted(domains)}")
        n_classes = {p.n_classes for p in parts} - {None}
        return Dataset(
            frames=np.concatenate([p.frames for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            lengths=[t for p in parts for t in p.lengths],
            utt_ids=[u for p in parts for u in p.utt_ids],
            utt_tags=[t for p in parts for t in p.utt_tags],
            domain=domains.pop(),
            seed=seed,
            n_classes=max(n_classes) if n_classes else None,
        )

    def __len__(self):
        return len(self.frames)

    @property
    def n_utterances(self) -> int:
        return len(self.lengths)

    @property
    def frame_tags(self) -> np.ndarray:
        return np.repeat(np.array([t.value for t in self.utt_tags], dtype=object), self.lengths)

    @property
    def provenance(self) -> Dict[Bandwidth, int]:
        hist = Counter()
        for tag, t in zip(self.utt_tags, self.lengths):
            hist[tag] += t
        return dict(hist)

    def windows(self, idx) -> np.ndarray:
        """Context windows ``(len(idx), 3, 11, dim)`` for window indices ``idx``."""
        return self.frames[self._ctx[idx]].transpose(0, 2, 1, 3)

    def utterance(self, i: int) -> FeatureSequence:
        a, b = self.offsets[i], self.offsets[i + 1]
        return FeatureSequence(self.frames[a:b], 3, self.utt_tags[i], self.utt_ids[i])

    def utterance_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def subset(self, utt_indices: Sequence[int]) -> "Dataset":
        sl = [self.utterance_slice(i) for i in utt_indices]
        return Dataset(
            frames=np.concatenate([self.frames[s] for s in sl]),
            labels=np.concatenate([self.labels[s] for s in sl]),
            lengths=[self.lengths[i] for i in utt_indices],
            utt_ids=[self.utt_ids[i] for i in utt_indices],
            utt_tags=[self.utt_tags[i] for i in utt_indices],
            domain=self.domain,
            seed=self.seed,
            n_classes=self.n_classes,
        )
