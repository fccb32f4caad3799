import numpy as np
import pytest

from mbam import dsp
from mbam.data import Dataset, Utterance
from mbam.mixing import Frontend
from mbam.synth import SynthConfig, synth_corpus

ACCEPTANCE_LINES = {}


def record_acceptance(criterion: str, passed: bool, detail: str):
    """Keep one status line per acceptance criterion for the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k[0]), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


TOY_SYNTH = SynthConfig(utt_per_class_wb=2, utt_per_class_nb=2, utt_seconds=0.5, seed=3)


@pytest.fixture(scope="session")
def toy_corpus():
    """Small WB/NB corpora (10 utterances each, 0.5 s)."""
    wb, nb, labels = synth_corpus(TOY_SYNTH)
    return wb, nb


@pytest.fixture(scope="session")
def toy_wb_dataset(toy_corpus):
    wb, _ = toy_corpus
    return Frontend().dataset(wb, "wb", n_classes=TOY_SYNTH.n_classes, seed=0)


def random_dataset(n_utts=4, t=9, n_classes=5, seed=0, tag=dsp.Bandwidth.WB, domain="wb"):
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for i in range(n_utts):
        static = dsp.FeatureSequence(rng.standard_normal((t, dsp.N_MELS)), 1, tag, f"u{i}")
        feats.append(dsp.compute_deltas(static))
        labels.append(rng.integers(0, n_classes, size=t))
    return Dataset.from_features(feats, labels, domain, seed=seed, n_classes=n_classes)


def sine(freq, rate, seconds=0.5, amp=1.0):
    t = np.arange(int(rate * seconds)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


__all__ = ["record_acceptance", "random_dataset", "sine", "Utterance"]
