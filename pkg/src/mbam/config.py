"""Experiment config files: sectioned ``key = value`` text.

Each section maps onto one config dataclass; keys are its field names and
values are parsed by the field's type. Keys left out keep the desk-scale
defaults of :class:`RunConfig`. Unknown sections and keys are errors,
so a typo never silently falls back to a default.

    [experiment]
    strategy = DirectMixUp
    test_sets = WS1:wb, WS2:wb, NS1:nb, NS2:nb

    [model]
    conv_maps = 8, 16
    fc_dim = 64
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

from .bwe import BweTrainConfig
from .errors import ConfigError, FormatError
from .harness import DEFAULT_TEST_SETS, ExperimentConfig, GridConfig
from .mixing import FinetuneConfig, MixStrategy
from .models import AcousticModelConfig, BweModelConfig
from .parallel import TrainConfig
from .synth import SynthConfig


@dataclass(frozen=True)
class ExperimentSection:
    strategy: str = "WBOnly"
    name: Optional[str] = None
    bwe_checkpoint: Optional[str] = None
    test_sets: Tuple[Tuple[str, str], ...] = DEFAULT_TEST_SETS
    n_test_utts: int = 20
    output: Optional[str] = None


_NOT_FROM_FILE = {"templates"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_test_sets(text: str):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, bw = item.partition(":")
        if not sep:
            raise ValueError(f"test set {item!r} must be name:bandwidth")
        out.append((name.strip(), bw.strip()))
    return tuple(out)


def _parse(text: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if text.strip().lower() in ("", "none"):
            return None
        return _parse(text, next(a for a in args if a is not type(None)))
    if tp is bool:
        return _parse_bool(text)
    if tp in (int, float, str):
        return tp(text.strip())
    if origin is tuple:
        if args and typing.get_origin(args[0]) is tuple:
            return _parse_test_sets(text)
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(_parse(p, a) for p, a in zip(parts, args))
    raise ValueError(f"unsupported field type {tp}")


def _build(base, section: str, items: dict):
    """``base`` with the keys of one section replaced."""
    cls = type(base)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - _NOT_FROM_FILE
    kwargs = {}
    for key, text in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}; valid keys: {', '.join(sorted(names))}")
        try:
            kwargs[key] = _parse(text, hints[key])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    try:
        return replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


SECTIONS = {
    "experiment": ExperimentSection,
    "synth": SynthConfig,
    "model": AcousticModelConfig,
    "bwe_model": BweModelConfig,
    "train": TrainConfig,
    "bwe_train": BweTrainConfig,
    "finetune": FinetuneConfig,
}


_DESK = GridConfig()


@dataclass(frozen=True)
class RunConfig:
    """Every section of a config file; omitted sections take the desk-scale
    grid settings rather than the full-size model defaults."""

    experiment: ExperimentSection = ExperimentSection()
    synth: SynthConfig = _DESK.synth
    model: AcousticModelConfig = _DESK.model
    bwe_model: BweModelConfig = _DESK.bwe_model
    train: TrainConfig = _DESK.train
    bwe_train: BweTrainConfig = _DESK.bwe_ce
    finetune: FinetuneConfig = _DESK.finetune
    present: frozenset = field(default_factory=frozenset)

    def with_overrides(self, seed: Optional[int] = None, learners: Optional[int] = None,
                       output: Optional[str] = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(
                cfg,
                synth=replace(cfg.synth, seed=seed),
                model=replace(cfg.model, seed=seed),
                bwe_model=replace(cfg.bwe_model, seed=seed),
                train=replace(cfg.train, seed=seed),
                bwe_train=replace(cfg.bwe_train, seed=seed),
                finetune=replace(cfg.finetune, seed=seed),
            )
        if learners is not None:
            cfg = replace(cfg, train=replace(cfg.train, n_learners=learners),
                          finetune=replace(cfg.finetune, n_learners=learners))
        if output is not None:
            cfg = replace(cfg, experiment=replace(cfg.experiment, output=output))
        return cfg

    def experiment_config(self) -> ExperimentConfig:
        e = self.experiment
        return ExperimentConfig(MixStrategy(e.strategy, e.bwe_checkpoint), self.model, self.train,
                                e.test_sets, e.output, e.name)

    def grid_config(self) -> GridConfig:
        """Grid settings; the CE-BWE schedule comes from ``[bwe_train]`` and the
        MMSE schedule keeps the desk default."""
        return GridConfig(
            synth=self.synth,
            n_test_utts=self.experiment.n_test_utts,
            model=self.model,
            train=self.train,
            bwe_model=self.bwe_model,
            bwe_ce=replace(self.bwe_train, criterion="ce", denoising=False),
            bwe_mmse=replace(_DESK.bwe_mmse, seed=self.bwe_train.seed),
            finetune=self.finetune,
            test_sets=self.experiment.test_sets,
        )


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    built = {}
    defaults = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; valid: {', '.join(SECTIONS)}")
        built[section] = _build(getattr(defaults, section), section, dict(parser.items(section)))
    return RunConfig(**built, present=frozenset(built))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
    return parse_config(text, str(path))
