import pytest

from mbam.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from mbam.formats import load_checkpoint, read_corpus
from mbam.harness import read_report_csv
from mbam.mixing import load_dataset

TINY = """
[experiment]
strategy = DirectMixUp
n_test_utts = 1

[synth]
utt_per_class_wb = 1
utt_per_class_nb = 1
utt_seconds = 0.5

[model]
conv_maps = 2, 4
fc_dim = 16

[train]
epochs_flat = 1
epochs_anneal = 0
per_learner_batch = 4
n_learners = 2
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--maps", "2,2", "--samples", "10"]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out


def test_unknown_config_key_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nmaps = 4\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_data_dir_exit_code(tmp_path, tiny_cfg):
    assert main(["train", "--config", str(tiny_cfg), "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")]) == EXIT_IO


def test_missing_config_file_exit_code(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == EXIT_IO


def test_bad_learner_count(tmp_path):
    assert main(["gradcheck", "--learners", "0"]) == EXIT_CONFIG


def test_synth_features_train_eval(tmp_path, tiny_cfg, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--config", str(tiny_cfg), "--out", str(data)]) == EXIT_OK
    assert len(read_corpus(data / "wb")) == 5 and len(read_corpus(data / "test" / "NS2")) == 1

    arch = tmp_path / "nb.mbfa"
    assert main(["features", "--input", str(data / "nb"), "--domain", "wb", "--out", str(arch)]) == EXIT_OK
    ds = load_dataset(arch)
    assert ds.domain == "wb" and {str(t) for t in ds.utt_tags} == {"NB_upsampled"}

    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_cfg), "--data", str(data), "--out", str(out)]) == EXIT_OK
    net = load_checkpoint(out / "DirectMixUp.mbnn")
    assert net.meta["domain"] == "wb"
    table = read_report_csv(out / "DirectMixUp.csv")
    assert set(table.columns) == {"WS1", "WS2", "NS1", "NS2"}
    assert len((out / "DirectMixUp.log").read_text().splitlines()) == 1

    capsys.readouterr()
    assert main(["eval", "--config", str(tiny_cfg), "--data", str(data), "--model",
                 str(out / "DirectMixUp.mbnn"), "--out", str(out)]) == EXIT_OK
    assert "NB-avg" in capsys.readouterr().out


def test_eval_rejects_bwe_as_model(tmp_path, tiny_cfg):
    from mbam.formats import save_checkpoint
    from mbam.models import BweModelConfig, build_bwe_vgg

    path = tmp_path / "b.mbnn"
    save_checkpoint(build_bwe_vgg(BweModelConfig((2, 2), 8)), path)
    assert main(["eval", "--config", str(tiny_cfg), "--model", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
