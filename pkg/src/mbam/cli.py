"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure
(NaN loss, divergence, replica mismatch, failed gradient check), 3 I/O.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bwe import make_parallel_pairs, train_bwe_ce, train_bwe_mmse
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, MbamError, NumericalError
from .formats import load_checkpoint, read_corpus, save_checkpoint, write_corpus
from .harness import (
    ReportTable,
    Workspace,
    emit_report,
    evaluate,
    gradient_report,
    run_experiment,
    run_grid,
)
from .mixing import Frontend, finetune_protocol, save_dataset
from .models import build_bwe_vgg, compose
from .synth import synth_corpus, synth_test_sets

log = logging.getLogger("mbam")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(seed=args.seed, learners=args.learners, output=args.out)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workspace(cfg: RunConfig, data_dir) -> Workspace:
    """Corpora from a ``synth`` output directory, or synthesized on the fly."""
    if data_dir is None:
        return Workspace.synthesize(cfg.synth, cfg.experiment.n_test_utts)
    root = Path(data_dir)
    if not root.is_dir():
        raise FormatError(f"{root}: no such corpus directory")
    tests = {}
    for name, _ in cfg.experiment.test_sets:
        tests[name] = read_corpus(root / "test" / name)
    wb, nb = read_corpus(root / "wb"), read_corpus(root / "nb")
    return Workspace(wb, nb, tests, cfg.synth.n_classes, cfg.synth.seed)


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    wb, nb, _ = synth_corpus(cfg.synth)
    write_corpus(out / "wb", wb)
    write_corpus(out / "nb", nb)
    for name, utts in synth_test_sets(cfg.synth, cfg.experiment.n_test_utts).items():
        write_corpus(out / "test" / name, utts)
    print(f"wrote {len(wb)} WB and {len(nb)} NB utterances plus test sets to {out}")
    return EXIT_OK


def cmd_features(args) -> int:
    utts = read_corpus(args.input)
    frontend = Frontend()
    if args.stats_from:
        frontend.fit(read_corpus(args.stats_from), args.domain)
    ds = frontend.dataset(utts, args.domain, seed=args.seed or 0)
    out = Path(args.out or "features.mbfa")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"{out}: {ds.n_utterances} utterances, {len(ds)} frames, provenance "
          + ", ".join(f"{k}={v}" for k, v in sorted((str(k), v) for k, v in ds.provenance.items())))
    return EXIT_OK


def _load_bwe(path):
    bwe = load_checkpoint(path, dtype=np.float32)
    if bwe.meta["role"] != "bwe":
        raise ConfigError(f"{path} is not a BWE checkpoint")
    return bwe.freeze()


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ec = cfg.experiment_config()
    out = _out_dir(args)
    ec = replace(ec, output=str(out))
    ws = _workspace(cfg, args.data)
    bwe = _load_bwe(ec.strategy.bwe_checkpoint) if ec.strategy.bwe_checkpoint else None
    table = ReportTable.for_test_sets(ec.test_sets)
    run_experiment(ec, ws, table, bwe=bwe, log_path=out / f"{ec.row_name}.log")
    emit_report(table, out / f"{ec.row_name}.txt")
    print((out / f"{ec.row_name}.txt").read_text(), end="")
    return EXIT_OK


def cmd_bwe_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    ws = _workspace(cfg, args.data)
    tc = cfg.bwe_train
    bwe = load_checkpoint(args.init) if args.init else build_bwe_vgg(cfg.bwe_model)
    bwe.meta.update(role="bwe", domain="wb")
    if tc.criterion == "mmse" or tc.mmse_init_epochs:
        pairs = make_parallel_pairs(ws.wb, ws.frontend.stats["wb"])
        mmse_cfg = tc if tc.criterion == "mmse" else replace(
            tc, criterion="mmse", denoising=False, epochs_flat=tc.mmse_init_epochs, epochs_anneal=0)
        bwe, hist = train_bwe_mmse(bwe, pairs, mmse_cfg)
        for h in hist:
            print("mmse\t" + h.line())
    if tc.criterion == "ce":
        if not args.acoustic:
            raise ConfigError("CE BWE training needs --acoustic (the frozen WB model checkpoint)")
        phi = load_checkpoint(args.acoustic)
        if phi.meta["domain"] != "wb" or phi.meta["role"] != "acoustic":
            raise ConfigError(f"{args.acoustic} is not a WB acoustic model")
        phi.freeze()
        bwe, hist = train_bwe_ce(compose(bwe, phi), ws.nb_train_upsampled(), tc)
        for h in hist:
            print("ce\t" + h.line())
    path = out / (args.name or f"bwe_{tc.criterion}{'_dn' if tc.denoising else ''}.mbnn")
    save_checkpoint(bwe, path)
    print(f"saved {path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    ws = _workspace(cfg, args.data)
    bwe = load_checkpoint(args.bwe)
    mb = load_checkpoint(args.mb)
    nb_up = ws.nb_train_upsampled()
    wb = ws.frontend.dataset(ws.wb, "wb", ws.n_classes, cfg.train.seed)
    res = finetune_protocol(bwe, mb, nb_up, wb, cfg.finetune, cfg.model)
    for stage, hist in (("stage1", res.stage1_history), ("stage2", res.stage2_history)):
        for h in hist:
            print(f"{stage}\t" + h.line())
    for key, value in res.checksums.items():
        print(f"{key}\t{value}")
    save_checkpoint(res.bwe, out / "bwe_ft.mbnn")
    res.mb.meta["domain"] = "wb"
    save_checkpoint(res.mb, out / "mb_ft.mbnn")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    ws = _workspace(cfg, args.data)
    net = load_checkpoint(args.model)
    if net.meta["role"] != "acoustic":
        raise ConfigError(f"{args.model} is a BWE checkpoint; pass it with --bwe")
    bwe = _load_bwe(args.bwe) if args.bwe else None
    name = args.name or Path(args.model).stem
    net.name = name
    table = ReportTable.for_test_sets(cfg.experiment.test_sets)
    cells, paths = evaluate(net, ws, cfg.experiment.test_sets, bwe)
    table.add_row(name, cells, paths)
    txt, _ = emit_report(table, out / f"{name}_eval.txt")
    print(txt.read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    maps = tuple(int(v) for v in args.maps.split(","))
    start = time.perf_counter()
    results = gradient_report(seed=args.seed or 0, maps=maps, n_samples=args.samples)
    worst = 0.0
    for name, res in results.items():
        worst = max(worst, res.max_rel_error)
        flag = "ok" if res.max_rel_error < args.tol else "FAIL"
        print(f"{name:16s} {res.max_rel_error:.3e}  checked={res.n_checked} kinks={res.n_kinks}  {flag}")
    print(f"max relative error {worst:.3e} (tol {args.tol:g}) in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if worst < args.tol else EXIT_NUMERICAL


def cmd_report(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    grid = cfg.grid_config()
    if args.seed is not None:
        grid = grid.with_seed(args.seed)
    if args.learners is not None:
        grid = grid.with_learners(args.learners)
    ws = _workspace(cfg, args.data) if args.data else None
    result = run_grid(grid, out_dir=out, include_finetune=not args.no_finetune, ws=ws)
    print((out / "report.txt").read_text(), end="")
    print("seconds: " + ", ".join(f"{k}={v:.1f}" for k, v in result.seconds.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    common.add_argument("--learners", type=int, default=None, help="number of data-parallel learners")
    common.add_argument("--out", default=None, help="output directory (or file for 'features')")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mbam", description="Mixed-bandwidth acoustic modeling toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True, data=True):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if config:
            sp.add_argument("--config", help="experiment config file")
        if data:
            sp.add_argument("--data", help="corpus directory written by 'synth' (default: synthesize)")
        sp.set_defaults(func=fn)
        return sp

    add("synth", cmd_synth, "write the synthetic WB/NB corpora and test sets as WAV", data=False)
    sp = add("features", cmd_features, "featurize a corpus directory into a feature archive", config=False, data=False)
    sp.add_argument("--input", required=True, help="corpus directory (WAVs + labels.txt)")
    sp.add_argument("--domain", choices=("wb", "nb"), required=True)
    sp.add_argument("--stats-from", help="corpus whose global statistics to use (default: the input)")
    add("train", cmd_train, "train one acoustic model for the configured strategy")
    sp = add("bwe-train", cmd_bwe_train, "train a BWE network (CE through a frozen WB model, or MMSE)")
    sp.add_argument("--acoustic", help="frozen WB acoustic model checkpoint (CE criterion)")
    sp.add_argument("--init", help="initial BWE checkpoint")
    sp.add_argument("--name", help="output checkpoint file name")
    sp = add("finetune", cmd_finetune, "run the two-stage MixFT protocol")
    sp.add_argument("--bwe", required=True)
    sp.add_argument("--mb", required=True)
    sp = add("eval", cmd_eval, "score a checkpoint on the configured test sets")
    sp.add_argument("--model", required=True)
    sp.add_argument("--bwe", help="BWE checkpoint applied to NB test sets")
    sp.add_argument("--name", help="row name in the report")
    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every layer and model", config=False, data=False)
    sp.add_argument("--maps", default="4,8", help="conv maps of the checked acoustic model")
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp = add("report", cmd_report, "run the full condition grid and write report.txt / report.csv")
    sp.add_argument("--no-finetune", action="store_true", help="skip the MixFT row")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.learners is not None and args.learners < 1:
        print("error: --learners must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MbamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
