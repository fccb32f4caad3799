import pytest

from mbam.config import RunConfig, load_config, parse_config
from mbam.errors import ConfigError, FormatError
from mbam.harness import DEFAULT_TEST_SETS, GridConfig


def test_empty_config_is_desk_scale():
    cfg = parse_config("")
    desk = GridConfig()
    assert cfg.model == desk.model and cfg.train == desk.train and cfg.synth == desk.synth
    assert cfg.experiment.test_sets == DEFAULT_TEST_SETS
    assert cfg.present == frozenset()


def test_partial_section_keeps_other_keys():
    cfg = parse_config("[model]\nconv_maps = 4, 8\n")
    assert cfg.model.conv_maps == (4, 8)
    assert cfg.model.fc_dim == GridConfig().model.fc_dim
    assert cfg.model.n_classes == 5
    assert cfg.present == {"model"}


def test_typed_values():
    cfg = parse_config(
        "[experiment]\nstrategy = MixBwe\nname = none\ntest_sets = A:wb, B:nb\n"
        "[bwe_train]\ndenoising = yes\nnoise_variance = 0.02\n"
        "[synth]\nnb_channel_hz = none\n"
        "[train]\nn_learners = 2\n"
    )
    assert cfg.experiment.strategy == "MixBwe" and cfg.experiment.name is None
    assert cfg.experiment.test_sets == (("A", "wb"), ("B", "nb"))
    assert cfg.bwe_train.denoising is True and cfg.bwe_train.noise_variance == 0.02
    assert cfg.synth.nb_channel_hz is None
    assert cfg.train.n_learners == 2


@pytest.mark.parametrize("text", [
    "[model]\nconv_map = 4, 8\n",  # unknown key
    "[optimizer]\nlr = 1\n",  # unknown section
    "[train]\nn_learners = two\n",
    "[bwe_train]\ndenoising = maybe\n",
    "[experiment]\ntest_sets = WS1\n",
    "[model]\nconv_maps = 4\n",
    "[train]\nn_learners = 0\n",  # rejected by the dataclass itself
    "[synth]\ntemplates = x\n",
    "no section header\n",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_overrides():
    cfg = parse_config("").with_overrides(seed=7, learners=2, output="o")
    assert cfg.synth.seed == 7 and cfg.model.seed == 7 and cfg.finetune.seed == 7
    assert cfg.train.n_learners == 2 and cfg.finetune.n_learners == 2
    assert cfg.experiment.output == "o"


def test_experiment_and_grid_views():
    cfg = parse_config("[experiment]\nstrategy = DirectMixUp\n[bwe_train]\nbase_lr = 0.05\n")
    ec = cfg.experiment_config()
    assert ec.strategy.kind.value == "DirectMixUp" and ec.model == cfg.model
    grid = cfg.grid_config()
    assert grid.bwe_ce.base_lr == 0.05 and grid.bwe_ce.criterion == "ce"
    assert grid.bwe_mmse.criterion == "mmse"


def test_default_grid_view_matches_desk_grid():
    assert RunConfig().grid_config() == GridConfig()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(FormatError):
        load_config(tmp_path / "none.cfg")
    (tmp_path / "a.cfg").write_text("[train]\nepochs_flat = 3\n")
    assert load_config(tmp_path / "a.cfg").train.epochs_flat == 3
