"""Evaluation metrics, the result table, and the experiment grid runner."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dsp
from .autodiff import GradCheckResult, LayerSpec, Network, grad_check
from .bwe import BweTrainConfig, composite_predictions, make_parallel_pairs, train_bwe_ce, train_bwe_mmse
from .data import Dataset
from .dsp import Bandwidth
from .errors import ConfigError, EmptyCorpusError, FormatError, ShapeError
from .mixing import FinetuneConfig, Frontend, MixKind, MixStrategy, assemble, finetune_protocol
from .models import (
    AcousticModelConfig,
    INPUT_SHAPE,
    BweModelConfig,
    CompositeModel,
    build_acoustic_cnn,
    build_bwe_vgg,
    compose,
    forward_posteriors,
)
from .parallel import TrainConfig, train
from .synth import SynthConfig, synth_corpus, synth_test_sets

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# metrics


def posterior_error_rate(posteriors, labels) -> float:
    """``100 * (1 - mean[argmax posterior == label])``."""
    posteriors = np.asarray(posteriors)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyCorpusError("cannot score an empty test set")
    if posteriors.shape[0] != len(labels):
        raise ShapeError(f"{posteriors.shape[0]} posterior rows for {len(labels)} labels")
    return float(100.0 * (1.0 - np.mean(posteriors.argmax(axis=1) == labels)))


def frame_error_rate(model, test: Dataset) -> float:
    """Frame error rate (%) of a network or a BWE composite on a labeled dataset."""
    if len(test) == 0:
        raise EmptyCorpusError("cannot score an empty test set")
    if isinstance(model, CompositeModel):
        pred = composite_predictions(model, test)
    else:
        pred = forward_posteriors(model, test.windows(np.arange(len(test)))).argmax(axis=1)
    return float(100.0 * (1.0 - np.mean(pred == test.labels)))


def gradient_report(seed: int = 0, maps: Tuple[int, int] = (4, 8), bwe_maps=((4, 8), (8, 16)),
                    n_samples: int = 200, fc_dim: int = 16) -> Dict[str, GradCheckResult]:
    """Max relative error of back-propagation against central differences
    (float64) for every layer kind, the acoustic CNN, the BWE network(s) and
    the BWE composite with a frozen acoustic model."""
    rng = np.random.default_rng(seed)
    out: Dict[str, float] = {}
    small = (2, 6, 7)
    x_small = rng.standard_normal((3,) + small)
    y_small = rng.integers(0, 5, size=3)
    head = LayerSpec("linear", out_dim=5)
    layer_nets = {
        "conv2d": [LayerSpec("conv2d", (3, 3), (1, 1), (1, 1), in_maps=2, out_maps=3), head],
        "maxpool2d": [LayerSpec("maxpool2d", (2, 2), (2, 2)), head],
        "linear": [LayerSpec("linear", out_dim=7), head],
        "relu": [LayerSpec("relu"), head],
        "sigmoid": [LayerSpec("sigmoid"), head],
        "tanh": [LayerSpec("tanh"), head],
        "scale": [LayerSpec("scale", scale=2.5), head],
    }
    for kind, specs in layer_nets.items():
        net = Network(specs, small, dtype=np.float64, seed=seed)
        out[kind] = grad_check(net, x_small, "ce", y_small, n_samples=n_samples, seed=seed,
                               check_input=True, return_details=True)
    net = Network([LayerSpec("linear", out_dim=5), LayerSpec("softmax_out")], small, dtype=np.float64, seed=seed)
    target = rng.dirichlet(np.ones(5), size=3)
    out["softmax_out"] = grad_check(net, x_small, "mse", target, n_samples=n_samples, seed=seed,
                                    check_input=True, return_details=True)

    x = rng.standard_normal((3,) + INPUT_SHAPE)
    acoustic = build_acoustic_cnn(AcousticModelConfig(maps, fc_dim, 5, seed, zero_init_output=False), np.float64)
    out[f"acoustic{list(maps)}"] = grad_check(acoustic, x, "ce", y_small, n_samples=n_samples, seed=seed,
                                               check_input=True, return_details=True)
    for bm in bwe_maps:
        bwe = build_bwe_vgg(BweModelConfig(bm, fc_dim, seed=seed, zero_init_output=False), np.float64)
        out[f"bwe{list(bm)}"] = grad_check(bwe, x, "mse", rng.standard_normal((3, dsp.N_MELS)),
                                            n_samples=n_samples, seed=seed, check_input=True,
                                            return_details=True)

    t = 7
    windows = dsp.context_tensor(dsp.compute_deltas(
        dsp.FeatureSequence(rng.standard_normal((t, dsp.N_MELS)), 1, Bandwidth.NB_UPSAMPLED)))
    acoustic.freeze()
    bwe = build_bwe_vgg(BweModelConfig(bwe_maps[0], fc_dim, seed=seed, zero_init_output=False), np.float64)
    cm = compose(bwe, acoustic)
    # parameters only: edge windows repeat clipped frames, and nudging a single
    # copy breaks max-pool ties in a direction with no derivative
    out["composite"] = grad_check(cm, windows, "ce", rng.integers(0, 5, size=t), n_samples=n_samples,
                                  seed=seed, return_details=True, lengths=[t])
    return out


# --------------------------------------------------------------------------
# report table


@dataclass
class ReportTable:
    """Rows are conditions, columns are test sets; group averages are derived."""

    columns: List[str]
    groups: Dict[str, List[str]]
    rows: Dict[str, Dict[str, float]] = field(default_factory=dict)
    paths: Dict[str, Dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        for g, members in self.groups.items():
            missing = set(members) - set(self.columns)
            if missing or not members:
                raise ConfigError(f"group {g} refers to unknown or no columns: {sorted(missing)}")

    @classmethod
    def for_test_sets(cls, test_sets: Sequence[Tuple[str, str]]) -> "ReportTable":
        cols = [name for name, _ in test_sets]
        groups = {}
        for label, bw in (("WB-avg", "wb"), ("NB-avg", "nb")):
            members = [name for name, b in test_sets if b == bw]
            if members:
                groups[label] = members
        return cls(cols, groups)

    def add_row(self, name: str, cells: Dict[str, float], paths: Optional[Dict[str, str]] = None):
        missing = set(self.columns) - set(cells)
        if missing:
            raise ShapeError(f"row {name} lacks cells for {sorted(missing)}")
        self.rows[name] = {c: float(cells[c]) for c in self.columns}
        if paths:
            self.paths[name] = dict(paths)

    def average(self, row: str, group: str) -> float:
        members = self.groups[group]
        return float(np.mean([self.rows[row][c] for c in members]))

    def full_row(self, row: str) -> Dict[str, float]:
        out = dict(self.rows[row])
        for g in self.groups:
            out[g] = self.average(row, g)
        return out

    @property
    def header(self) -> List[str]:
        return list(self.columns) + list(self.groups)

    def __len__(self):
        return len(self.rows)


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise FormatError(f"{path}: cannot write report ({exc.strerror or exc})") from exc


def emit_report(table: ReportTable, path) -> Tuple[Path, Path]:
    """Write ``path`` as an aligned text table and ``path`` with a ``.csv``
    suffix as CSV. Floats go to the CSV in ``repr`` form so a re-read is exact."""
    if not len(table):
        raise ShapeError("refusing to emit an empty report")
    path = Path(path)
    header = table.header
    for row in table.rows:
        full = table.full_row(row)
        for g, members in table.groups.items():
            assert abs(full[g] - sum(full[c] for c in members) / len(members)) < 1e-9

    width = max(12, *(len(r) for r in table.rows)) + 2
    lines = ["condition".ljust(width) + "".join(h.rjust(9) for h in header)]
    for row in table.rows:
        full = table.full_row(row)
        lines.append(row.ljust(width) + "".join(f"{full[h]:9.2f}" for h in header))
    if table.paths:
        lines.append("")
        lines.append("decode paths:")
        for row, paths in table.paths.items():
            lines.append(f"  {row}: " + ", ".join(f"{k}={v}" for k, v in paths.items()))
    txt_path = path if path.suffix != ".csv" else path.with_suffix(".txt")
    _write(txt_path, "\n".join(lines) + "\n")

    csv_lines = [",".join(["condition"] + header)]
    for row in table.rows:
        full = table.full_row(row)
        csv_lines.append(",".join([row] + [repr(full[h]) for h in header]))
    csv_path = path.with_suffix(".csv")
    _write(csv_path, "\n".join(csv_lines) + "\n")
    return txt_path, csv_path


def read_report_csv(path, groups: Optional[Dict[str, List[str]]] = None) -> ReportTable:
    """Inverse of the CSV half of :func:`emit_report`; stored averages are checked."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            records = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read report ({exc.strerror or exc})") from exc
    if not records or records[0][0] != "condition":
        raise FormatError(f"{path}: missing header row")
    header = records[0][1:]
    avg_cols = [h for h in header if h.endswith("-avg")]
    columns = [h for h in header if h not in avg_cols]
    if groups is None:
        groups = {}
        for g in avg_cols:
            prefix = g[:-4][0]  # "W" / "N"
            groups[g] = [c for c in columns if c.upper().startswith(prefix)]
    table = ReportTable(columns, groups)
    for rec in records[1:]:
        if len(rec) != len(header) + 1:
            raise FormatError(f"{path}: row {rec[0]!r} has {len(rec) - 1} cells, expected {len(header)}")
        values = dict(zip(header, map(float, rec[1:])))
        table.add_row(rec[0], {c: values[c] for c in columns})
        for g in avg_cols:
            if abs(table.average(rec[0], g) - values[g]) > 1e-9:
                raise FormatError(f"{path}: stored {g} of {rec[0]} is not the mean of its group")
    return table


# --------------------------------------------------------------------------
# bandwidth paths


def decode_path(model_domain: str, test_bandwidth: str, with_bwe: bool = False) -> str:
    """Human-readable resampling path a test set takes to reach a model."""
    if model_domain not in ("wb", "nb") or test_bandwidth not in ("wb", "nb"):
        raise ConfigError(f"unknown domain/bandwidth {model_domain!r}/{test_bandwidth!r}")
    if with_bwe:
        if model_domain != "wb" or test_bandwidth != "nb":
            raise ConfigError("BWE decoding applies only to NB test sets against a WB-domain model")
        return "nb->upsample->bwe"
    if model_domain == test_bandwidth:
        return f"{test_bandwidth}-native"
    return "nb->upsample" if model_domain == "wb" else "wb->downsample"


def check_decode_path(model, test: Dataset, set_name: str):
    """Refuse feature/model pairings that skip the required resampling step."""
    if isinstance(model, CompositeModel):
        domain = model.acoustic.meta.get("domain")
        allowed = {Bandwidth.NB_UPSAMPLED}
    else:
        domain = model.meta.get("domain")
        allowed = dsp.WB_DOMAIN_TAGS - {Bandwidth.BWE_MAPPED} if domain == "wb" else dsp.NB_DOMAIN_TAGS
    if domain not in ("wb", "nb"):
        raise ConfigError(f"test set {set_name}: model carries no feature-domain tag")
    bad = sorted({t.value for t in test.utt_tags} - {t.value for t in allowed})
    if bad or test.domain != domain:
        raise ConfigError(
            f"test set {set_name}: {bad or [test.domain]} features cannot be decoded by a {domain}-domain model"
        )


# --------------------------------------------------------------------------
# experiments


DEFAULT_TEST_SETS = (("WS1", "wb"), ("WS2", "wb"), ("NS1", "nb"), ("NS2", "nb"))


@dataclass(frozen=True)
class ExperimentConfig:
    """One acoustic-model training run and its evaluation."""

    strategy: MixStrategy
    model: AcousticModelConfig = AcousticModelConfig()
    train: TrainConfig = TrainConfig()
    test_sets: Tuple[Tuple[str, str], ...] = DEFAULT_TEST_SETS
    output: Optional[str] = None
    name: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.strategy, MixStrategy):
            object.__setattr__(self, "strategy", MixStrategy(self.strategy))
        if not self.test_sets:
            raise ConfigError("an experiment needs at least one test set")
        for name, bw in self.test_sets:
            if bw not in ("wb", "nb"):
                raise ConfigError(f"test set {name}: bandwidth must be wb or nb, got {bw!r}")
        if self.strategy.bwe_checkpoint and not Path(self.strategy.bwe_checkpoint).exists():
            raise ConfigError(f"BWE checkpoint {self.strategy.bwe_checkpoint} does not exist")

    @property
    def row_name(self) -> str:
        return self.name or self.strategy.kind.value


class Workspace:
    """Corpora, test sets and featurization state shared by the grid."""

    def __init__(self, wb, nb, tests: Dict[str, list], n_classes: int, seed: int = 0):
        self.wb, self.nb, self.tests = list(wb), list(nb), dict(tests)
        self._n_classes = n_classes
        self.seed = seed
        self.frontend = Frontend()
        # global statistics come from the matched training corpus of each domain
        if self.wb:
            self.frontend.fit(self.wb, "wb")
        if self.nb:
            self.frontend.fit(self.nb, "nb")
        self._cache: Dict[Tuple[str, str], Dataset] = {}

    @classmethod
    def synthesize(cls, synth: SynthConfig, n_test_utts: int = 20) -> "Workspace":
        wb, nb, _ = synth_corpus(synth)
        return cls(wb, nb, synth_test_sets(synth, n_test_utts), synth.n_classes, synth.seed)

    @property
    def n_classes(self) -> int:
        return self._n_classes

    def test_dataset(self, name: str, domain: str) -> Dataset:
        key = (name, domain)
        if key not in self._cache:
            self._cache[key] = self.frontend.dataset(self.tests[name], domain, self.n_classes, self.seed)
        return self._cache[key]

    def nb_train_upsampled(self) -> Dataset:
        key = ("nb-train", "wb")
        if key not in self._cache:
            self._cache[key] = self.frontend.dataset(self.nb, "wb", self.n_classes, self.seed)
        return self._cache[key]


def evaluate(model: Network, ws: Workspace, test_sets, bwe: Optional[Network] = None):
    """``(cells, paths)``: frame error per test set and the path each one took."""
    domain = model.meta.get("domain")
    cells, paths = {}, {}
    for name, bw in test_sets:
        use_bwe = bwe is not None and bw == "nb"
        path = decode_path(domain, bw, use_bwe)
        ds = ws.test_dataset(name, domain)
        if use_bwe:
            # the composite wants a frozen acoustic side; evaluation never updates it anyway
            was_frozen = model.frozen
            model.freeze()
            target = compose(bwe, model)
        else:
            target = model
        try:
            check_decode_path(target, ds, name)
            cells[name] = frame_error_rate(target, ds)
        finally:
            if use_bwe:
                model.frozen = was_frozen
        paths[name] = path
        log.info("eval %s on %s via %s: %.2f%%", model.name, name, path, cells[name])
    return cells, paths


def run_experiment(cfg: ExperimentConfig, ws: Workspace, table: ReportTable,
                   bwe: Optional[Network] = None, log_path=None):
    """Assemble the strategy's training data, train, evaluate, append a row.
    Returns ``(net, history)``."""
    cfg.strategy.validate(bwe is not None)
    if cfg.model.n_classes < ws.n_classes:
        raise ConfigError(f"model has {cfg.model.n_classes} outputs for {ws.n_classes} classes")
    ds = assemble(cfg.strategy, ws.wb, ws.nb, bwe=bwe, frontend=ws.frontend,
                  seed=cfg.train.seed, n_classes=ws.n_classes)
    net = build_acoustic_cnn(replace(cfg.model, seed=cfg.train.seed))
    net.meta["domain"] = cfg.strategy.domain
    net.meta["strategy"] = cfg.strategy.kind.value
    net.name = cfg.row_name
    start = time.perf_counter()
    net, history = train(net, ds, cfg.train, log_path=log_path)
    log.info("trained %s on %s in %.1fs", cfg.row_name, ds.provenance, time.perf_counter() - start)
    cells, paths = evaluate(net, ws, cfg.test_sets, bwe if cfg.strategy.needs_bwe else None)
    table.add_row(cfg.row_name, cells, paths)
    if cfg.output:
        from .formats import save_checkpoint

        out = Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, out / f"{cfg.row_name}.mbnn")
    return net, history


@dataclass(frozen=True)
class GridConfig:
    """Desk-scale stand-in for the full result grid."""

    synth: SynthConfig = SynthConfig(utt_per_class_wb=8, utt_per_class_nb=16)
    n_test_utts: int = 20
    model: AcousticModelConfig = AcousticModelConfig(conv_maps=(8, 16), fc_dim=64, n_classes=5)
    train: TrainConfig = TrainConfig(base_lr=0.1, epochs_flat=4, epochs_anneal=2, per_learner_batch=8, n_learners=4)
    bwe_model: BweModelConfig = BweModelConfig(conv_maps=(4, 8), fc_dim=64)
    bwe_ce: BweTrainConfig = BweTrainConfig(base_lr=0.03, epochs_flat=4, epochs_anneal=2, batch_size=1)
    bwe_mmse: BweTrainConfig = BweTrainConfig(criterion="mmse", base_lr=0.001, epochs_flat=4,
                                              epochs_anneal=2, batch_size=64)
    finetune: FinetuneConfig = FinetuneConfig(original_lr=0.1, stage1_lr=0.003, bwe_batch_size=1,
                                              per_learner_batch=8, n_learners=4)
    test_sets: Tuple[Tuple[str, str], ...] = DEFAULT_TEST_SETS

    def with_seed(self, seed: int) -> "GridConfig":
        return replace(
            self,
            synth=replace(self.synth, seed=seed),
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
            bwe_model=replace(self.bwe_model, seed=seed),
            bwe_ce=replace(self.bwe_ce, seed=seed),
            bwe_mmse=replace(self.bwe_mmse, seed=seed),
            finetune=replace(self.finetune, seed=seed),
        )

    def with_learners(self, k: int) -> "GridConfig":
        return replace(self, train=replace(self.train, n_learners=k), finetune=replace(self.finetune, n_learners=k))


@dataclass
class GridResult:
    table: ReportTable
    models: Dict[str, Network]
    bwes: Dict[str, Network]
    histories: Dict[str, list] = field(default_factory=dict)
    finetune: Optional[object] = None
    seconds: Dict[str, float] = field(default_factory=dict)


def _train_bwe(kind: str, cfg: GridConfig, ws: Workspace, phi: Network) -> Network:
    bwe = build_bwe_vgg(cfg.bwe_model)
    if kind == "MMSE-BWE":
        pairs = make_parallel_pairs(ws.wb, ws.frontend.stats["wb"])
        bwe, _ = train_bwe_mmse(bwe, pairs, cfg.bwe_mmse)
    else:
        tc = replace(cfg.bwe_ce, denoising=kind == "nBWE")
        bwe, _ = train_bwe_ce(compose(bwe, phi), ws.nb_train_upsampled(), tc)
    bwe.name = kind
    return bwe


def run_grid(cfg: GridConfig = GridConfig(), out_dir=None, include_finetune: bool = True,
             ws: Optional[Workspace] = None) -> GridResult:
    """Train and score every condition: baselines, direct mixing, the three
    BWE variants decoded through the frozen WB model, MB models on
    BWE-mapped NB data, and the MixFT fine-tune. Writes ``report.txt`` and
    ``report.csv`` into ``out_dir`` when given."""
    ws = ws or Workspace.synthesize(cfg.synth, cfg.n_test_utts)
    table = ReportTable.for_test_sets(cfg.test_sets)
    result = GridResult(table, {}, {})

    def timed(key, fn, *args, **kwargs):
        start = time.perf_counter()
        out = fn(*args, **kwargs)
        result.seconds[key] = time.perf_counter() - start
        return out

    def experiment(kind, bwe=None, name=None):
        ec = ExperimentConfig(MixStrategy(kind), cfg.model, cfg.train, cfg.test_sets, name=name)
        net, result.histories[ec.row_name] = timed(ec.row_name, run_experiment, ec, ws, table, bwe)
        result.models[ec.row_name] = net
        return net

    phi = experiment(MixKind.WB_ONLY)
    for kind in (MixKind.NB_ONLY, MixKind.WB_DOWN, MixKind.DIRECT_MIX_UP, MixKind.DIRECT_MIX_DOWN):
        experiment(kind)

    phi.freeze()
    for kind in ("BWE", "nBWE", "MMSE-BWE"):
        bwe = timed(kind, _train_bwe, kind, cfg, ws, phi)
        bwe.freeze()
        result.bwes[kind] = bwe
        cells, paths = evaluate(phi, ws, cfg.test_sets, bwe)
        table.add_row(kind, cells, paths)
    phi.unfreeze()

    experiment(MixKind.MIX_BWE, result.bwes["BWE"])
    experiment(MixKind.MIX_NBWE, result.bwes["nBWE"])

    if include_finetune:
        start = time.perf_counter()
        mb = result.models[MixKind.MIX_BWE.value].copy()
        bwe = result.bwes["BWE"].copy()
        nb_up = ws.nb_train_upsampled()
        wb = ws.frontend.dataset(ws.wb, "wb", ws.n_classes, cfg.train.seed)
        ft = finetune_protocol(bwe, mb, nb_up, wb, cfg.finetune, cfg.model)
        ft.mb.meta["domain"] = "wb"
        ft.mb.name = "MixFT"
        ft.bwe.freeze()
        cells, paths = evaluate(ft.mb, ws, cfg.test_sets, ft.bwe)
        table.add_row("MixFT", cells, paths)
        result.finetune = ft
        result.models["MixFT"] = ft.mb
        result.seconds["MixFT"] = time.perf_counter() - start

    if out_dir is not None:
        emit_report(table, Path(out_dir) / "report.txt")
    return result
