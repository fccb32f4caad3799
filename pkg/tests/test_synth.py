import numpy as np
import pytest

from conftest import TOY_SYNTH
from mbam import dsp
from mbam.errors import ConfigError
from mbam.synth import (
    ClassTemplate,
    SynthConfig,
    frame_labels,
    nb_channel,
    render_segment,
    synth_test_sets,
    synth_utterances,
)


def band_power(x, rate, lo, hi):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)))) ** 2
    f = np.fft.rfftfreq(len(x), 1 / rate)
    return spec[(f >= lo) & (f < hi)].sum()


def test_utterances_deterministic():
    a = synth_utterances(TOY_SYNTH, 2, "wb", "x")
    b = synth_utterances(TOY_SYNTH, 2, "wb", "x")
    for u, v in zip(a, b):
        assert np.array_equal(u.wave.samples, v.wave.samples)
        assert np.array_equal(u.labels, v.labels)


def test_seed_changes_audio():
    a = synth_utterances(TOY_SYNTH, 1, "wb", "x")[0]
    b = synth_utterances(SynthConfig(**{**TOY_SYNTH.__dict__, "seed": 4}), 1, "wb", "x")[0]
    assert not np.array_equal(a.wave.samples, b.wave.samples)


@pytest.mark.parametrize("bw, rate", [("wb", 16000), ("nb", 8000)])
def test_one_label_per_frame(bw, rate):
    for u in synth_utterances(TOY_SYNTH, 3, bw, "x"):
        assert u.wave.sample_rate == rate
        assert len(u.labels) == dsp.logmel(u.wave).n_frames
        assert u.labels.min() >= 0 and u.labels.max() < TOY_SYNTH.n_classes
        assert np.max(np.abs(u.wave.samples)) <= 1.0


def test_frame_labels_follow_boundaries():
    # two segments of 0.25 s each at 16 kHz
    labels = frame_labels([0, 4000], [2, 4], 8000, 16000)
    shift = 0.01
    centers = np.arange(len(labels)) * shift + 0.0125
    assert np.all(labels[centers < 0.25] == 2) and np.all(labels[centers >= 0.25] == 4)


def test_high_band_class_loses_its_band_in_nb():
    cfg = SynthConfig(nb_line_noise_db=None)
    rng = np.random.default_rng(0)
    x = render_segment(cfg.templates[3], 16000, rng, cfg)
    up = dsp.upsample_2x(dsp.downsample_2x(dsp.Waveform(nb_channel(x, cfg), 16000))).samples
    wb_high = band_power(x, 16000, 5000, 6000)
    nb_high = band_power(up, 16000, 5000, 6000)
    assert 10 * np.log10(wb_high / nb_high) >= 35


def test_telephone_channel_attenuates_outside_band():
    cfg = SynthConfig(nb_line_noise_db=None)
    x = np.random.default_rng(1).standard_normal(16000)
    y = nb_channel(x, cfg)
    assert 10 * np.log10(band_power(x, 16000, 0, 100) / band_power(y, 16000, 0, 100)) > 30
    assert abs(10 * np.log10(band_power(x, 16000, 1000, 2000) / band_power(y, 16000, 1000, 2000))) < 1


def test_test_sets_layout():
    sets = synth_test_sets(TOY_SYNTH, n_utts=1)
    assert sorted(sets) == ["NS1", "NS2", "WS1", "WS2"]
    assert sets["WS1"][0].wave.sample_rate == 16000 and sets["NS2"][0].wave.sample_rate == 8000


@pytest.mark.parametrize("kwargs", [
    dict(n_classes=1),
    dict(n_classes=6),
    dict(templates=(ClassTemplate(((500, 100, -200),)),) + TOY_SYNTH.templates[1:]),
    dict(templates=(ClassTemplate(((9000, 100, 0),)),) + TOY_SYNTH.templates[1:]),
    dict(nb_channel_hz=(300.0, 4500.0)),
    dict(segment_ms=(200.0, 100.0)),
    dict(utt_seconds=0.01),
    dict(n_classes=3),  # no class above 4 kHz among the first three
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        SynthConfig(**kwargs)
