"""Training-corpus assembly for every bandwidth strategy, and the MixFT
alternating fine-tune protocol."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dsp
from .autodiff import Network
from .bwe import BweTrainConfig, map_dataset, train_bwe_ce
from .data import Dataset, Utterance, convert, featurize_corpus
from .dsp import Bandwidth, GlobalStats
from .errors import ConfigError, EmptyCorpusError, FreezeError, TagError
from .models import AcousticModelConfig, build_acoustic_cnn, compose
from .parallel import TrainConfig, train

log = logging.getLogger(__name__)


class MixKind(str, enum.Enum):
    WB_ONLY = "WBOnly"
    NB_ONLY = "NBOnly"
    WB_DOWN = "WBDown"
    DIRECT_MIX_UP = "DirectMixUp"
    DIRECT_MIX_DOWN = "DirectMixDown"
    MIX_BWE = "MixBwe"
    MIX_NBWE = "MixNBwe"

    def __str__(self):
        return self.value


BWE_KINDS = (MixKind.MIX_BWE, MixKind.MIX_NBWE)

#: feature domain of the model trained under each strategy
STRATEGY_DOMAIN = {
    MixKind.WB_ONLY: "wb",
    MixKind.NB_ONLY: "nb",
    MixKind.WB_DOWN: "nb",
    MixKind.DIRECT_MIX_UP: "wb",
    MixKind.DIRECT_MIX_DOWN: "nb",
    MixKind.MIX_BWE: "wb",
    MixKind.MIX_NBWE: "wb",
}


@dataclass(frozen=True)
class MixStrategy:
    kind: MixKind
    bwe_checkpoint: Optional[str] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", MixKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown strategy {self.kind!r}; choose from {[k.value for k in MixKind]}")

    @property
    def domain(self) -> str:
        return STRATEGY_DOMAIN[self.kind]

    @property
    def needs_bwe(self) -> bool:
        return self.kind in BWE_KINDS

    def validate(self, has_bwe: bool):
        if self.needs_bwe and not has_bwe:
            raise ConfigError(f"strategy {self.kind} requires a BWE network")
        if not self.needs_bwe and has_bwe:
            raise ConfigError(f"strategy {self.kind} does not take a BWE network")


class Frontend:
    """Featurizes corpora into datasets, holding global CMN statistics per
    feature domain (estimated from the first corpus seen in that domain)."""

    def __init__(self, stats: Optional[Dict[str, GlobalStats]] = None):
        self.stats: Dict[str, GlobalStats] = dict(stats or {})

    def fit(self, utts: Sequence[Utterance], domain: str) -> GlobalStats:
        """(Re)estimate the global statistics of ``domain`` from ``utts``."""
        stats = dsp.compute_global_stats([dsp.logmel(u.wave) for u in convert(utts, domain)])
        self.stats[domain] = stats
        return stats

    def features(self, utts: Sequence[Utterance], domain: str):
        converted = convert(utts, domain)
        feats, stats = featurize_corpus(converted, self.stats.get(domain))
        self.stats.setdefault(domain, stats)
        return feats

    def dataset(self, utts: Sequence[Utterance], domain: str, n_classes=None, seed: int = 0) -> Dataset:
        feats = self.features(utts, domain)
        return Dataset.from_features(feats, [u.labels for u in utts], domain, seed=seed, n_classes=n_classes)


def _rebalance(parts: List[Dataset]) -> List[Dataset]:
    """Duplicate utterances of the smaller parts until frame counts roughly match."""
    target = max(len(p) for p in parts)
    out = []
    for p in parts:
        reps = max(1, int(round(target / len(p))))
        out.append(p.subset(list(range(p.n_utterances)) * reps))
    return out


def assemble(
    strategy,
    wb: Sequence[Utterance],
    nb: Sequence[Utterance],
    bwe: Optional[Network] = None,
    frontend: Optional[Frontend] = None,
    seed: int = 0,
    n_classes: Optional[int] = None,
    rebalance: bool = False,
) -> Dataset:
    """Training dataset for one strategy; every utterance keeps its bandwidth tag."""
    if not isinstance(strategy, MixStrategy):
        strategy = MixStrategy(strategy)
    strategy.validate(bwe is not None)
    frontend = frontend or Frontend()
    kind = strategy.kind
    domain = strategy.domain

    needs_wb = kind != MixKind.NB_ONLY
    needs_nb = kind not in (MixKind.WB_ONLY, MixKind.WB_DOWN)
    if needs_wb and not wb:
        raise EmptyCorpusError(f"{kind} needs a WB corpus")
    if needs_nb and not nb:
        raise EmptyCorpusError(f"{kind} needs an NB corpus")
    for u in wb if needs_wb else ():
        if u.wave.sample_rate != dsp.WB_RATE:
            raise TagError(f"{u.utterance_id}: WB corpus holds {u.wave.sample_rate} Hz audio")
    for u in nb if needs_nb else ():
        if u.wave.sample_rate != dsp.NB_RATE:
            raise TagError(f"{u.utterance_id}: NB corpus holds {u.wave.sample_rate} Hz audio")

    parts = []
    if needs_wb:
        parts.append(frontend.dataset(wb, domain, n_classes, seed))
    if needs_nb:
        nb_part = frontend.dataset(nb, domain, n_classes, seed)
        if bwe is not None:
            nb_part = map_dataset(bwe, nb_part)
        parts.append(nb_part)
    if rebalance and len(parts) > 1:
        parts = _rebalance(parts)
    ds = Dataset.concat(parts, seed=seed) if len(parts) > 1 else parts[0]
    ds.meta["strategy"] = kind.value
    return ds


def save_dataset(ds: Dataset, path):
    """Feature archive plus ``.prov`` (key=value provenance) and ``.labels`` sidecars."""
    from .formats import write_archive, write_sidecar

    path = Path(path)
    write_archive(path, [ds.utterance(i) for i in range(ds.n_utterances)])
    side = {"domain": ds.domain, "seed": ds.seed, "n_classes": ds.n_classes, "strategy": ds.meta.get("strategy", "")}
    for tag, count in sorted(ds.provenance.items()):
        side[f"frames.{tag}"] = count
    for uid, tag in zip(ds.utt_ids, ds.utt_tags):
        side[f"utt.{uid}"] = tag.value
    write_sidecar(str(path) + ".prov", side)
    with open(str(path) + ".labels", "w") as fh:
        for i, uid in enumerate(ds.utt_ids):
            fh.write(uid + " " + " ".join(map(str, ds.labels[ds.utterance_slice(i)])) + "\n")


def load_dataset(path) -> Dataset:
    from .formats import read_archive, read_sidecar

    side = read_sidecar(str(path) + ".prov")
    tags = {k[4:]: Bandwidth(v) for k, v in side.items() if k.startswith("utt.")}
    feats = read_archive(path, tags)
    labels = {}
    for line in Path(str(path) + ".labels").read_text().splitlines():
        uid, *labs = line.split()
        labels[uid] = np.array(labs, dtype=np.int64)
    n_classes = None if side.get("n_classes") in (None, "None", "") else int(side["n_classes"])
    ds = Dataset.from_features(feats, [labels[f.utterance_id] for f in feats], side["domain"],
                               seed=int(side.get("seed", 0)), n_classes=n_classes)
    ds.meta["strategy"] = side.get("strategy", "")
    return ds


# --------------------------------------------------------------------------
# MixFT


@dataclass(frozen=True)
class FinetuneConfig:
    original_lr: float = 0.01
    stage1_epochs: int = 6
    stage2_epochs: int = 6
    stage1_lr: Optional[float] = None  # default original_lr / 10
    stage2_lr: Optional[float] = None  # default original_lr / 10
    from_scratch: bool = False
    denoising: bool = False
    allow_nonstandard: bool = False
    bwe_batch_size: int = 2
    per_learner_batch: int = 32
    n_learners: int = 4
    seed: int = 0

    @property
    def lr1(self) -> float:
        return self.original_lr / 10 if self.stage1_lr is None else self.stage1_lr

    @property
    def lr2(self) -> float:
        return self.original_lr / 10 if self.stage2_lr is None else self.stage2_lr

    def validate(self):
        if self.allow_nonstandard:
            return
        problems = []
        if self.stage1_epochs != 6 or self.stage2_epochs != 6:
            problems.append(f"epochs {self.stage1_epochs}+{self.stage2_epochs} (protocol: 6+6)")
        if not 0 < self.lr1 < self.original_lr:
            problems.append(f"stage-1 LR {self.lr1} is not smaller than {self.original_lr}")
        if not np.isclose(self.lr2, self.original_lr / 10):
            problems.append(f"stage-2 LR {self.lr2} is not 1/10 of {self.original_lr}")
        if problems:
            raise ConfigError("MixFT config contradicts the protocol: " + "; ".join(problems)
                              + " (set allow_nonstandard to override)")


@dataclass
class FinetuneResult:
    bwe: Network
    mb: Network
    stage1_history: list
    stage2_history: list
    checksums: Dict[str, str] = field(default_factory=dict)


def finetune_protocol(
    bwe: Network,
    mb: Network,
    nb_up: Dataset,
    wb: Dataset,
    cfg: FinetuneConfig = FinetuneConfig(),
    mb_config: Optional[AcousticModelConfig] = None,
) -> FinetuneResult:
    """Stage 1: freeze the MB model, fine-tune the BWE through it.
    Stage 2: freeze the BWE, re-map the NB data, retrain the MB model.

    ``nb_up`` holds the upsampled NB training frames (pre-mapping), ``wb``
    the WB training frames.
    """
    cfg.validate()
    sums = {}

    mb.freeze()
    sums["mb_before_stage1"] = mb.checksum()
    stage1 = BweTrainConfig(
        criterion="ce", denoising=cfg.denoising, base_lr=cfg.lr1, epochs_flat=cfg.stage1_epochs,
        epochs_anneal=0, batch_size=cfg.bwe_batch_size, seed=cfg.seed,
    )
    bwe.unfreeze()
    bwe, hist1 = train_bwe_ce(compose(bwe, mb), nb_up, stage1)
    sums["mb_after_stage1"] = mb.checksum()
    if sums["mb_after_stage1"] != sums["mb_before_stage1"]:
        raise FreezeError("MB parameters changed while fine-tuning the BWE")
    mb.unfreeze()

    bwe.freeze()
    sums["bwe_before_stage2"] = bwe.checksum()
    remapped = Dataset.concat([wb, map_dataset(bwe, nb_up)], seed=wb.seed)
    if cfg.from_scratch:
        if mb_config is None:
            raise ConfigError("from-scratch stage 2 needs the MB model config")
        new_mb = build_acoustic_cnn(mb_config, dtype=mb.dtype)
    else:
        new_mb = mb.copy()
    new_mb.unfreeze()
    new_mb.meta.update(mb.meta)
    stage2 = TrainConfig(
        base_lr=cfg.lr2, epochs_flat=cfg.stage2_epochs, epochs_anneal=0,
        per_learner_batch=cfg.per_learner_batch, n_learners=cfg.n_learners, seed=cfg.seed,
    )
    new_mb, hist2 = train(new_mb, remapped, stage2)
    sums["bwe_after_stage2"] = bwe.checksum()
    if sums["bwe_after_stage2"] != sums["bwe_before_stage2"]:
        raise FreezeError("BWE parameters changed while retraining the MB model")
    return FinetuneResult(bwe, new_mb, hist1, hist2, sums)
