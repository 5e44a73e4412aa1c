import pytest

from pedcc_ssl.config import KEYS, ConfigError, load_config, parse_config, resolve_config_path
from pedcc_ssl.losses import PRESETS, HyperParams


def test_defaults_parse():
    cfg = parse_config("")
    assert cfg.data.kind == "blobs"
    assert cfg.hyperparams() == HyperParams()


def test_dotted_keys_and_comments():
    cfg = parse_config("# comment\n\nloss.lambda3 = 12.5\nmodel.hidden = 8, 4\ntrain.steps=7\n")
    assert cfg.loss.lambda3 == 12.5
    assert cfg.model.hidden == (8, 4)
    assert cfg.train.steps == 7


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r"exp\.cfg:3: unknown key 'loss.lamda3'"):
        parse_config("train.steps = 1\n\nloss.lamda3 = 4\n", source="exp.cfg")


def test_malformed_line_names_line():
    with pytest.raises(ConfigError, match=r"config:2: expected 'key = value'"):
        parse_config("train.steps = 1\nnonsense\n")


def test_bad_value_names_line():
    with pytest.raises(ConfigError, match=r"config:1: bad value for train.steps"):
        parse_config("train.steps = many\n")


def test_semantic_validation():
    with pytest.raises(ConfigError, match="m must lie"):
        parse_config("loss.m = 1.5\n")
    with pytest.raises(ConfigError, match="data.kind"):
        parse_config("data.kind = svhn\n")
    with pytest.raises(ConfigError, match="unknown preset"):
        parse_config("preset = imagenet\n")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_sets_loss_weights(name):
    cfg = parse_config(f"preset = {name}\n")
    assert cfg.hyperparams() == PRESETS[name]


def test_preset_position_does_not_override_later_keys():
    # The preset is a base layer: explicit keys win even when they come first.
    cfg = parse_config("loss.lambda3 = 9\npreset = paper-svhn\n")
    assert cfg.loss.lambda3 == 9
    assert cfg.loss.lambda4 == PRESETS["paper-svhn"].lambda4


def test_overrides_apply_after_file():
    cfg = parse_config("loss.lambda3 = 9\n", ["loss.lambda3=400", "loss.lambda4 = 0.2"])
    assert (cfg.loss.lambda3, cfg.loss.lambda4) == (400, 0.2)


def test_override_error_source():
    with pytest.raises(ConfigError, match=r"--set: unknown key"):
        parse_config("", ["loss.nope=1"])


def test_missing_referenced_file(tmp_path):
    with pytest.raises(ConfigError, match="missing path"):
        parse_config(f"centroids.file = {tmp_path / 'none.txt'}\n")
    with pytest.raises(ConfigError, match="cifar_dir is required"):
        parse_config("data.kind = cifar10\n")
    with pytest.raises(ConfigError, match="missing path"):
        parse_config(f"data.kind = cifar10\ndata.cifar_dir = {tmp_path / 'nope'}\n")


def test_sigma_median_keyword():
    assert parse_config("loss.sigma = median\n").hyperparams().sigma is None
    assert parse_config("loss.sigma = 0.7\n").hyperparams().sigma == 0.7


@pytest.mark.parametrize("name", ["blobs", "blobs-2d", "paper-cifar10", "paper-svhn"])
def test_bundled_presets_load(name):
    cfg = load_config(name)
    assert cfg.train.steps >= 1
    assert resolve_config_path(name).name == f"{name}.cfg"


def test_bundled_blobs_matches_quickstart():
    cfg = load_config("blobs")
    assert (cfg.data.classes, cfg.data.input_dim, cfg.data.separation, cfg.data.labeled_per_class) == (4, 8, 4.0, 4)
    assert cfg.data.per_class_train - cfg.data.labeled_per_class == 500
    assert cfg.train.steps == 4000 and cfg.train.seeds == 5
    assert cfg.hyperparams() == PRESETS["paper-cifar10"]


def test_unknown_config_name():
    with pytest.raises(FileNotFoundError):
        resolve_config_path("no-such-config")


def test_training_config_plumbing():
    cfg = parse_config("train.labeled_batch = 32\ntrain.unlabeled_batch = 160\ntrain.seed = 4\n")
    tc = cfg.training_config(seed_offset=2)
    assert tc.composition == (32, 160)
    assert tc.seed == 6
    assert tc.hp == cfg.hyperparams()


def test_as_dict_covers_every_key():
    d = parse_config("").as_dict()
    assert set(KEYS) <= set(d)
    assert d["model.hidden"] == [32]


def test_architecture_follows_data_kind(tmp_path):
    assert parse_config("").model_config().arch == "mlp"
    cfg = parse_config(f"data.kind = cifar10\ndata.cifar_dir = {tmp_path}\n")
    assert cfg.model_config().arch == "conv_small"
    assert cfg.model_config().input_shape == (3, 32, 32)
    assert parse_config("model.arch = mlp\n").model_config().arch == "mlp"
