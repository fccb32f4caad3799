"""Bandwidth extension: training the NB->WB feature mapping and applying it.

Three training modes share one network:

* ``ce``: cross-entropy of the frozen WB acoustic model applied to the
  mapped features (gradients flow through the acoustic model into the BWE);
* ``ce`` with ``denoising``: same, with Gaussian noise on the BWE inputs;
* ``mmse``: squared-error regression onto parallel WB frames.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from . import dsp
from .autodiff import Network, mse_loss, sgd_step, softmax_ce_loss
from .data import Dataset, Utterance, featurize_corpus
from .dsp import Bandwidth, FeatureSequence
from .errors import AlignmentError, ConfigError, DivergenceError, FreezeError, TagError
from .models import CompositeModel, forward_posteriors
from .parallel import EpochLog, TrainConfig, lr_schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BweTrainConfig:
    criterion: str = "ce"
    denoising: bool = False
    noise_variance: float = 0.01
    base_lr: float = 0.01
    epochs_flat: int = 10
    epochs_anneal: int = 10
    anneal_factor: float = 0.5
    batch_size: int = 2  # utterances per step for "ce", windows per step for "mmse"
    seed: int = 0
    mmse_init_epochs: int = 0

    def __post_init__(self):
        if self.criterion not in ("ce", "mmse"):
            raise ConfigError(f"unknown BWE criterion {self.criterion!r}")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be >= 0")
        if self.denoising and self.criterion != "ce":
            raise ConfigError("denoising BWE is defined for the CE criterion only")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @property
    def epochs(self) -> int:
        return self.epochs_flat + self.epochs_anneal

    def schedule(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            epochs_flat=self.epochs_flat,
            epochs_anneal=self.epochs_anneal,
            anneal_factor=self.anneal_factor,
            seed=self.seed,
        )

    def lr(self, epoch: int) -> float:
        return lr_schedule(epoch, self.schedule())


@dataclass
class ParallelPair:
    nb_up_features: FeatureSequence
    wb_features: FeatureSequence

    def __post_init__(self):
        if self.nb_up_features.n_frames != self.wb_features.n_frames:
            raise AlignmentError(
                f"{self.wb_features.utterance_id}: {self.nb_up_features.n_frames} NB frames "
                f"vs {self.wb_features.n_frames} WB frames"
            )


def make_parallel_pairs(wb_utts: Sequence[Utterance], stats=None) -> List[ParallelPair]:
    """WB utterance -> (downsample then upsample, original) feature pairs."""
    narrowed = [Utterance(dsp.upsample_2x(dsp.downsample_2x(u.wave)), u.labels) for u in wb_utts]
    wb_feats, stats = featurize_corpus(wb_utts, stats)
    nb_feats, _ = featurize_corpus(narrowed, stats)
    return [ParallelPair(n, w) for n, w in zip(nb_feats, wb_feats)]


def add_denoising_noise(batch, variance: float, rng) -> np.ndarray:
    """``batch + N(0, variance)`` i.i.d. per element."""
    if variance < 0:
        raise ValueError("noise variance must be >= 0")
    batch = np.asarray(batch)
    if variance == 0:
        return batch
    noise = rng.normal(0.0, np.sqrt(variance), size=batch.shape)
    return (batch + noise).astype(batch.dtype)


def noise_rng(seed: int, epoch: int, batch_index: int):
    return np.random.default_rng([seed, epoch, batch_index, 0x6E6F])


def pseudo_label(acoustic: Network, nb_up: FeatureSequence) -> np.ndarray:
    """Per-frame argmax of the acoustic posteriors (ties go to the lowest class)."""
    post = forward_posteriors(acoustic, dsp.context_tensor(nb_up))
    return post.argmax(axis=1)


def _require_nb_up(ds: Dataset):
    bad = {t for t in ds.utt_tags if t != Bandwidth.NB_UPSAMPLED}
    if bad:
        raise TagError(f"BWE inputs must be upsampled NB features, found {sorted(map(str, bad))}")


def train_bwe_ce(cm: CompositeModel, dataset: Dataset, cfg: BweTrainConfig = BweTrainConfig()):
    """Minimize frame CE of ``acoustic(reassemble(bwe(x)))`` over the BWE params.

    Returns ``(bwe, history)``; the acoustic network is verified unchanged.
    """
    if not cm.acoustic.frozen:
        raise FreezeError("acoustic model must stay frozen during BWE training")
    if cfg.criterion != "ce":
        raise ConfigError("train_bwe_ce needs criterion 'ce'")
    _require_nb_up(dataset)
    bwe = cm.bwe
    frozen_sum = cm.acoustic.checksum()
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        start = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(dataset.n_utterances)
        total_loss, total_correct, total_frames = 0.0, 0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            utts = order[lo : lo + cfg.batch_size]
            idx = np.concatenate([np.arange(dataset.offsets[u], dataset.offsets[u + 1]) for u in utts])
            lengths = [dataset.lengths[u] for u in utts]
            x = dataset.windows(idx)
            if cfg.denoising:
                x = add_denoising_noise(x, cfg.noise_variance, noise_rng(cfg.seed, epoch, b))
            y = dataset.labels[idx]
            logits = cm.forward(x, lengths=lengths, logits=True)
            loss, grad = softmax_ce_loss(logits, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite BWE loss at epoch {epoch}, batch {b}", b)
            cm.backward(grad, input_grad=False)
            sgd_step(bwe, lr)
            total_loss += loss * len(idx)
            total_correct += int((logits.argmax(axis=1) == y).sum())
            total_frames += len(idx)
        entry = EpochLog(epoch, lr, total_loss / total_frames, total_correct / total_frames,
                         time.perf_counter() - start)
        history.append(entry)
        log.info("bwe-ce epoch %s", entry.line())
    if cm.acoustic.checksum() != frozen_sum:
        raise FreezeError("frozen acoustic parameters changed during BWE training")
    return bwe, history


def _pair_arrays(pairs: Sequence[ParallelPair]):
    x_parts, y_parts = [], []
    for p in pairs:
        if p.nb_up_features.bandwidth_tag != Bandwidth.NB_UPSAMPLED:
            raise TagError(f"{p.nb_up_features.utterance_id}: MMSE inputs must be upsampled NB")
        x_parts.append(dsp.context_tensor(p.nb_up_features))
        y_parts.append(p.wb_features.static)
    return np.concatenate(x_parts).astype(np.float32), np.concatenate(y_parts).astype(np.float32)


def train_bwe_mmse(bwe: Network, pairs: Sequence[ParallelPair], cfg: BweTrainConfig = BweTrainConfig(criterion="mmse")):
    """Regress the centre WB static frame from the upsampled-NB window."""
    if bwe.frozen:
        raise FreezeError("cannot train a frozen BWE network")
    x, y = _pair_arrays(pairs)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr(epoch)
        start = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(x))
        total = 0.0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            pred = bwe.forward(x[idx])
            loss, grad = mse_loss(pred, y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite MMSE loss at epoch {epoch}, batch {b}", b)
            bwe.backward(grad, input_grad=False)
            sgd_step(bwe, lr)
            total += loss * len(idx)
        entry = EpochLog(epoch, lr, total / len(x), float("nan"), time.perf_counter() - start)
        history.append(entry)
        log.info("bwe-mmse epoch %s", entry.line())
    return bwe, history


def mapping_mse(bwe: Network, pairs: Sequence[ParallelPair]) -> float:
    x, y = _pair_arrays(pairs)
    return mse_loss(bwe.predict(x).astype(np.float64), y.astype(np.float64))[0]


def map_features(bwe: Network, nb_up: FeatureSequence) -> FeatureSequence:
    """Replace static frames with BWE outputs and recompute deltas."""
    if nb_up.bandwidth_tag != Bandwidth.NB_UPSAMPLED:
        raise TagError(f"{nb_up.utterance_id}: expected NB_upsampled features, got {nb_up.bandwidth_tag}")
    static = bwe.predict(dsp.context_tensor(nb_up)).astype(np.float64)
    mapped = FeatureSequence(static, 1, Bandwidth.BWE_MAPPED, nb_up.utterance_id)
    return dsp.compute_deltas(mapped)


def map_dataset(bwe: Network, ds: Dataset) -> Dataset:
    _require_nb_up(ds)
    feats = [map_features(bwe, ds.utterance(i)) for i in range(ds.n_utterances)]
    labels = [ds.labels[ds.utterance_slice(i)] for i in range(ds.n_utterances)]
    return Dataset.from_features(feats, labels, "wb", seed=ds.seed, n_classes=ds.n_classes)


def composite_predictions(cm: CompositeModel, ds: Dataset) -> np.ndarray:
    """Per-frame argmax of ``acoustic(reassemble(bwe(x)))`` over a dataset."""
    _require_nb_up(ds)
    preds = []
    for i in range(ds.n_utterances):
        sl = ds.utterance_slice(i)
        x = ds.windows(np.arange(sl.start, sl.stop))
        preds.append(cm.predict(x, [ds.lengths[i]]).argmax(axis=1))
    return np.concatenate(preds)
