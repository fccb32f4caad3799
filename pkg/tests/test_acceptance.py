"""Acceptance criteria 1-7. Each test prints one PASS/FAIL line, and the
lines are repeated in the terminal summary.

The grid-based criteria (5, 6, 7) share one in-process grid run; criterion 7
repeats the grid through the command-line entry point in a fresh process
and compares the two report CSVs byte for byte.
"""

import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import TOY_SYNTH, random_dataset, record_acceptance
from mbam import dsp
from mbam.autodiff import LayerSpec, Network
from mbam.harness import GridConfig, gradient_report, run_grid
from mbam.models import INPUT_SHAPE, AcousticModelConfig, build_acoustic_cnn
from mbam.parallel import TrainConfig, lr_schedule, train
from mbam.synth import synth_utterances

SESSION_START = time.perf_counter()
SEED = 0
MARGIN = 2.0  # absolute frame-error percentage points


def _check(criterion, passed, detail):
    record_acceptance(criterion, passed, detail)
    assert passed, detail


# --------------------------------------------------------------------------
# 1. gradients


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    results = gradient_report(seed=SEED, maps=(4, 8), bwe_maps=((4, 8), (8, 16)), n_samples=200)
    elapsed = time.perf_counter() - start
    worst_name = max(results, key=lambda k: results[k].max_rel_error)
    worst = results[worst_name].max_rel_error
    required = {"conv2d", "maxpool2d", "linear", "relu", "sigmoid", "tanh", "scale", "softmax_out",
                "acoustic[4, 8]", "bwe[4, 8]", "bwe[8, 16]", "composite"}
    passed = required <= set(results) and worst < 1e-4 and elapsed < 120
    _check("1", passed, f"max rel error {worst:.2e} ({worst_name}) over {len(results)} checks, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 2. parallel equivalence


def _train_toy(ds, k, dtype, epochs=3):
    cfg = TrainConfig(base_lr=0.1, epochs_flat=epochs, epochs_anneal=0,
                      per_learner_batch=32 // k, n_learners=k, seed=SEED)
    net = build_acoustic_cnn(AcousticModelConfig((4, 8), 16, 5, SEED, zero_init_output=False), dtype)
    net, hist = train(net, ds, cfg)
    return net.params.copy(), hist


def test_criterion_2_parallel_equivalence(toy_wb_dataset):
    start = time.perf_counter()
    diffs = {}
    for dtype in (np.float64, np.float32):
        p4, hist = _train_toy(toy_wb_dataset, 4, dtype)
        p1, _ = _train_toy(toy_wb_dataset, 1, dtype)
        assert len(hist) == 3
        diffs[np.dtype(dtype).name] = float(np.max(np.abs(p4.astype(np.float64) - p1)))
    elapsed = time.perf_counter() - start
    passed = diffs["float64"] < 1e-12 and diffs["float32"] < 1e-6 and elapsed < 300
    _check("2", passed, f"K=4 vs K=1 after 3 epochs: 64-bit {diffs['float64']:.1e}, "
                        f"32-bit {diffs['float32']:.1e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 3. learning-rate schedule


def test_criterion_3_lr_schedule():
    expected = [0.01] * 10 + [0.005, 0.0025, 0.00125, 0.000625, 0.0003125, 0.00015625,
                              7.8125e-05, 3.90625e-05, 1.953125e-05, 9.765625e-06]
    cfg = TrainConfig()
    emitted = [lr_schedule(e, cfg) for e in range(cfg.epochs)]
    # a real 20-epoch run logs the same sequence
    ds = random_dataset(n_utts=2, t=4, seed=SEED)
    net = Network([LayerSpec("linear", out_dim=5), LayerSpec("softmax_out")], INPUT_SHAPE,
                  dtype=np.float64, seed=SEED)
    _, hist = train(net, ds, replace(cfg, per_learner_batch=2, n_learners=4))
    logged = [h.lr for h in hist]
    passed = emitted == expected and logged == expected
    _check("3", passed, f"{len(emitted)} epochs: {emitted[9]} -> {emitted[10]} -> ... -> {emitted[-1]}"
                        + ("" if passed else f"; got {emitted}, logged {logged}"))


# --------------------------------------------------------------------------
# 4. DSP invariants


def _central(x, frac=0.8):
    n = len(x)
    cut = int(n * (1 - frac) / 2)
    return slice(cut, n - cut)


def _db(a, b):
    return 10 * np.log10(a / b)


def test_criterion_4a_passband():
    start = time.perf_counter()
    t8 = np.arange(8000) / 8000
    up = dsp.upsample_2x(dsp.Waveform(np.sin(2 * np.pi * 1000 * t8), 8000)).samples
    t16 = np.arange(len(up)) / 16000
    ref = np.sin(2 * np.pi * 1000 * t16)
    sl = _central(up)
    gain_up = _db(np.mean(up[sl] ** 2), np.mean(ref[sl] ** 2))
    down = dsp.downsample_2x(dsp.Waveform(ref, 16000)).samples
    sl8 = _central(down)
    gain_down = _db(np.mean(down[sl8] ** 2), np.mean(np.sin(2 * np.pi * 1000 * t8)[sl8] ** 2))
    worst = max(abs(gain_up), abs(gain_down))
    passed = worst < 0.1 and time.perf_counter() - start < 60
    _check("4a", passed, f"1 kHz gain: up {gain_up:+.4f} dB, down {gain_down:+.4f} dB (limit 0.1 dB)")


def test_criterion_4b_rejection():
    start = time.perf_counter()
    # downsampler: a 6 kHz tone must not alias into the 8 kHz output
    x = np.sin(2 * np.pi * 6000 * np.arange(16000) / 16000)
    y = dsp.downsample_2x(dsp.Waveform(x, 16000)).samples
    down_rej = -_db(np.mean(y**2), np.mean(x**2))
    # upsampler: the image of a 3.5 kHz tone (at 4.5 kHz) must stay 40 dB down
    z = dsp.upsample_2x(dsp.Waveform(np.sin(2 * np.pi * 3500 * np.arange(8000) / 8000), 8000)).samples
    spec = np.abs(np.fft.rfft(z * np.blackman(len(z)))) ** 2
    freqs = np.fft.rfftfreq(len(z), 1 / 16000)
    up_rej = _db(spec.max(), spec[freqs > 4500].max())
    passed = down_rej >= 35 and up_rej >= 40 and time.perf_counter() - start < 60
    _check("4b", passed, f"alias rejection {down_rej:.1f} dB (>= 35), image rejection {up_rej:.1f} dB (>= 40)")


def test_criterion_4c_upper_bins_at_floor():
    start = time.perf_counter()
    nb = synth_utterances(TOY_SYNTH, 3, "nb", "nbchk")
    floor = np.log(dsp.LOG_FLOOR)
    cfg = dsp.AnalysisConfig.for_rate(16000)
    upper = dsp.mel_center_frequencies(cfg) > 4200
    worst = 0.0
    for u in nb:
        feats = dsp.logmel(dsp.upsample_2x(u.wave)).frames
        worst = max(worst, float(np.max(np.abs(feats[:, upper] - floor))))
    passed = worst <= 1.0 and time.perf_counter() - start < 60
    _check("4c", passed, f"{int(upper.sum())} bins above 4.2 kHz, max distance from log floor "
                         f"{floor:.2f}: {worst:.2f} nats (limit 1.0)")


# --------------------------------------------------------------------------
# 5-7. the condition grid


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid_a")
    start = time.perf_counter()
    result = run_grid(GridConfig().with_seed(SEED), out_dir=out)
    return result, out, time.perf_counter() - start


def _avg(table, row, group):
    return table.average(row, group)


@pytest.mark.slow
def test_criterion_5_orderings(grid):
    result, _, _ = grid
    t = result.table
    wb, nb = "WB-avg", "NB-avg"
    checks = {
        "5a": (_avg(t, "WBOnly", wb) + MARGIN <= _avg(t, "NBOnly", wb)
               and _avg(t, "NBOnly", nb) + MARGIN <= _avg(t, "WBOnly", nb),
               f"WB sets: WBOnly {_avg(t, 'WBOnly', wb):.2f} vs NBOnly {_avg(t, 'NBOnly', wb):.2f}; "
               f"NB sets: NBOnly {_avg(t, 'NBOnly', nb):.2f} vs WBOnly {_avg(t, 'WBOnly', nb):.2f}"),
        "5b": (_avg(t, "DirectMixUp", wb) <= _avg(t, "WBOnly", wb) + MARGIN
               and _avg(t, "DirectMixUp", nb) <= _avg(t, "NBOnly", nb) + MARGIN,
               f"DirectMixUp {_avg(t, 'DirectMixUp', wb):.2f}/{_avg(t, 'DirectMixUp', nb):.2f} vs "
               f"matched {_avg(t, 'WBOnly', wb):.2f}/{_avg(t, 'NBOnly', nb):.2f}"),
        "5c": (_avg(t, "DirectMixUp", wb) + MARGIN <= _avg(t, "DirectMixDown", wb),
               f"WB-avg DirectMixUp {_avg(t, 'DirectMixUp', wb):.2f} vs DirectMixDown "
               f"{_avg(t, 'DirectMixDown', wb):.2f}"),
        "5d": (_avg(t, "BWE", nb) + MARGIN <= _avg(t, "WBOnly", nb),
               f"NB-avg through frozen WB model: CE-BWE {_avg(t, 'BWE', nb):.2f} vs upsampled "
               f"{_avg(t, 'WBOnly', nb):.2f}"),
        "5e": (_avg(t, "BWE", nb) + MARGIN <= _avg(t, "MMSE-BWE", nb),
               f"NB-avg CE-BWE {_avg(t, 'BWE', nb):.2f} vs MMSE-BWE {_avg(t, 'MMSE-BWE', nb):.2f}"),
    }
    for key, (ok, detail) in checks.items():
        record_acceptance(key, ok, detail)
    failed = [k for k, (ok, _) in checks.items() if not ok]
    assert not failed, f"orderings failed: {failed}"


@pytest.mark.slow
def test_criterion_6_mixft(grid):
    result, _, _ = grid
    ft = result.finetune
    cfg = GridConfig().finetune
    t = result.table
    s1 = [h.lr for h in ft.stage1_history]
    s2 = [h.lr for h in ft.stage2_history]
    sums = ft.checksums
    pre, post = _avg(t, "MixBwe", "NB-avg"), _avg(t, "MixFT", "NB-avg")
    passed = (
        len(s1) == 6 and len(s2) == 6
        and s1 == [cfg.lr1] * 6 and s2 == [cfg.lr2] * 6
        and sums["mb_before_stage1"] == sums["mb_after_stage1"]
        and sums["bwe_before_stage2"] == sums["bwe_after_stage2"]
        and abs(post - pre) <= MARGIN
    )
    _check("6", passed, f"epochs {len(s1)}+{len(s2)} at lr {s1[0]:g}/{s2[0]:g}, frozen checksums "
                        f"invariant, NB-avg {pre:.2f} -> {post:.2f}")


@pytest.mark.slow
def test_criterion_7_reproducibility(grid, tmp_path):
    _, out_a, grid_seconds = grid
    out_b = tmp_path / "grid_b"
    env = dict(os.environ, PYTHONHASHSEED="0")
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "mbam.cli", "report", "--seed", str(SEED), "--out", str(out_b)],
        capture_output=True, text=True, env=env,
    )
    rerun = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr
    a = (out_a / "report.csv").read_bytes()
    b = (out_b / "report.csv").read_bytes()
    total = time.perf_counter() - SESSION_START
    passed = a == b and total < 30 * 60
    _check("7", passed, f"report CSVs {'identical' if a == b else 'DIFFER'} ({len(a)} bytes); grid "
                        f"{grid_seconds:.0f}s + rerun {rerun:.0f}s; suite wall time so far {total / 60:.1f} min "
                        f"on {os.cpu_count()} core(s)")
